"""SGD (Nesterov momentum, L2 weight decay) and Adam over :class:`Parameter` lists.

Parameters whose ``.grad`` is ``None`` are skipped entirely: no decay, no
momentum carry-over.  This is what keeps supernet weights outside the sampled
sub-graph bit-identical during a weight-training phase.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .tensor import Parameter


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for p in params:
            p.grad = p.grad * p.grad.dtype.type(factor)
    return total


class SGD:
    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 1e-4,
                 nesterov: bool = True):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            if p.grad.shape != p.shape:
                raise ValueError(f"{p.unique_id}: gradient shape {p.grad.shape} != {p.shape}")
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                v = self.velocity.get(p.unique_id)
                v = d.copy() if v is None else self.momentum * v + d
                self.velocity[p.unique_id] = v
                d = d + self.momentum * v if self.nesterov else v
            p.assign(p.data - lr * d)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self, prefix: str = "sgd") -> dict[str, np.ndarray]:
        return {f"{prefix}/v/{k}": v for k, v in self.velocity.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "sgd") -> None:
        head = f"{prefix}/v/"
        self.velocity = {k[len(head):]: v.copy() for k, v in arrays.items() if k.startswith(head)}


class Adam:
    def __init__(self, params: Sequence[Parameter], betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            if p.grad.shape != p.shape:
                raise ValueError(f"{p.unique_id}: gradient shape {p.grad.shape} != {p.shape}")
            key = p.unique_id
            g = p.grad
            t = self.t.get(key, 0) + 1
            m = self.beta1 * self.m.get(key, 0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(key, 0) + (1 - self.beta2) * g * g
            self.m[key], self.v[key], self.t[key] = m, v, t
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.assign(p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self, prefix: str = "adam") -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"{prefix}/m/{k}"] = np.asarray(self.m[k])
            out[f"{prefix}/v/{k}"] = np.asarray(self.v[k])
            out[f"{prefix}/t/{k}"] = np.asarray([self.t[k]], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "adam") -> None:
        self.m, self.v, self.t = {}, {}, {}
        for k, arr in arrays.items():
            if not k.startswith(prefix + "/"):
                continue
            kind, key = k[len(prefix) + 1:].split("/", 1)
            if kind == "m":
                self.m[key] = arr.copy()
            elif kind == "v":
                self.v[key] = arr.copy()
            elif kind == "t":
                self.t[key] = int(arr[0])
