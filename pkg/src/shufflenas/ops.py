"""Convolutional building blocks, candidate operations and channel plumbing.

Activations are ``N x C x H x W``.  Convolutions never carry a bias and use
"same" padding, so a stride-``s`` op maps ``H`` to ``ceil(H / s)``.
"""

from __future__ import annotations

import contextlib
import enum
import math
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, Tensor, _make, add_n, concat, get_default_dtype, index_select, relu, scale, slice_axis


class OperationId(enum.IntEnum):
    SEP3 = 0
    SEP5 = 1
    MAXPOOL3 = 2
    MINPOOL3 = 3
    IDENTITY = 4
    CONV1 = 5


NUM_OPS = len(OperationId)

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# cost tracing (consumed by analysis.estimate_costs)

_trace = threading.local()


@dataclass
class CostTrace:
    flops: int = 0
    mac: int = 0
    elementwise: int = 0
    nodes: int = 0
    events: list = field(default_factory=list)


@contextlib.contextmanager
def trace_costs():
    previous = getattr(_trace, "current", None)
    rec = CostTrace()
    _trace.current = rec
    try:
        yield rec
    finally:
        _trace.current = previous


def _record(kind: str, flops: int = 0, reads: int = 0, writes: int = 0, elementwise: bool = False) -> None:
    rec = getattr(_trace, "current", None)
    if rec is None:
        return
    rec.flops += flops
    rec.mac += reads + writes
    rec.elementwise += int(elementwise)
    rec.events.append((kind, flops, reads + writes))


def record_node() -> None:
    """Count one operation node of a cell graph."""
    rec = getattr(_trace, "current", None)
    if rec is not None:
        rec.nodes += 1


def _same_out(size: int, stride: int) -> int:
    return -(-size // stride)


# ---------------------------------------------------------------------------
# convolution primitives


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Dense convolution, ``w`` is ``out x in x kh x kw`` with odd kernels."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weights expect {ci}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    ho, wo = _same_out(h, stride), _same_out(wd, stride)
    xd, wdat = x.data, w.data
    _record("conv", flops=ho * wo * c * o * kh * kw * n, reads=xd.size + wdat.size, writes=n * o * ho * wo)

    if kh == kw == 1:
        xs = xd[:, :, ::stride, ::stride]
        wm = wdat[:, :, 0, 0]
        out = np.einsum("oc,nchw->nohw", wm, xs, optimize=True)

        def bw(g):
            dw = np.einsum("nohw,nchw->oc", g, xs, optimize=True)[:, :, None, None]
            dxs = np.einsum("oc,nohw->nchw", wm, g, optimize=True)
            if stride == 1:
                return dxs, dw
            dx = np.zeros_like(xd)
            dx[:, :, ::stride, ::stride] = dxs
            return dx, dw

        return _make(out, (x, w), bw, "conv2d")

    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(cols, wdat, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        dxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += np.einsum(
                    "nohw,oc->nchw", g, wdat[:, :, u, v], optimize=True
                )
        return dxp[:, :, ph : ph + h, pw : pw + wd], dw

    return _make(out, (x, w), bw, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Per-channel convolution, ``w`` is ``C x 1 x k x k``."""
    n, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[1] != 1:
        raise ValueError(f"depthwise_conv2d: weights {w.shape} do not fit {c} channels")
    k = w.shape[2]
    pad = k // 2
    ho, wo = _same_out(h, stride), _same_out(wd, stride)
    xd, wdat = x.data, w.data
    _record("dwconv", flops=n * ho * wo * c * k * k, reads=xd.size + wdat.size, writes=n * c * ho * wo)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
    taps = wdat[:, 0]
    for u in range(k):
        for v in range(k):
            out += xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] * taps[:, u, v][:, None, None]

    def bw(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wdat)
        for u in range(k):
            for v in range(k):
                window = (slice(None), slice(None), slice(u, u + stride * ho, stride), slice(v, v + stride * wo, stride))
                dw[:, 0, u, v] = np.einsum("nchw,nchw->c", g, xp[window])
                dxp[window] += g * taps[:, u, v][:, None, None]
        return dxp[:, :, pad : pad + h, pad : pad + wd], dw

    return _make(out, (x, w), bw, "depthwise_conv2d")


def _pool_extreme(x: Tensor, stride: int, largest: bool) -> Tensor:
    n, c, h, wd = x.shape
    ho, wo = _same_out(h, stride), _same_out(wd, stride)
    xd = x.data
    fill = -np.inf if largest else np.inf
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=fill)
    _record("pool", reads=xd.size, writes=n * c * ho * wo)
    offsets = [(u, v) for u in range(3) for v in range(3)]

    def window(u, v):
        return (slice(None), slice(None), slice(u, u + stride * ho, stride), slice(v, v + stride * wo, stride))

    reduce = np.maximum if largest else np.minimum
    best = xp[window(0, 0)].copy()
    for u, v in offsets[1:]:
        reduce(best, xp[window(u, v)], out=best)

    def bw(g):
        # the first window position holding the extreme value receives the gradient
        dxp = np.zeros_like(xp)
        taken = np.zeros(best.shape, dtype=bool)
        for u, v in offsets:
            hit = (xp[window(u, v)] == best) & ~taken
            taken |= hit
            dxp[window(u, v)] += np.where(hit, g, 0)
        return (dxp[:, :, 1 : 1 + h, 1 : 1 + wd],)

    return _make(best, (x,), bw, "maxpool" if largest else "minpool")


def max_pool3(x: Tensor, stride: int = 1) -> Tensor:
    return _pool_extreme(x, stride, largest=True)


def min_pool3(x: Tensor, stride: int = 1) -> Tensor:
    return _pool_extreme(x, stride, largest=False)


def avg_pool3(x: Tensor, stride: int = 1) -> Tensor:
    """3x3 average over the in-bounds part of each window."""
    n, c, h, wd = x.shape
    ho, wo = _same_out(h, stride), _same_out(wd, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ones = np.pad(np.ones((h, wd), dtype=x.dtype), 1)
    counts = np.zeros((ho, wo), dtype=x.dtype)
    total = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for u in range(3):
        for v in range(3):
            total += xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
            counts += ones[u : u + stride * ho : stride, v : v + stride * wo : stride]
    _record("pool", reads=x.size, writes=total.size)

    def bw(g):
        gs = g / counts
        dxp = np.zeros_like(xp)
        for u in range(3):
            for v in range(3):
                dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += gs
        return (dxp[:, :, 1 : 1 + h, 1 : 1 + wd],)

    return _make(total / counts, (x,), bw, "avgpool")


def subsample(x: Tensor, offset: int) -> Tensor:
    """Every second pixel starting at ``offset``; zero where the grid runs off the image."""
    n, c, h, wd = x.shape
    ho, wo = _same_out(h, 2), _same_out(wd, 2)
    picked = x.data[:, :, offset::2, offset::2]
    ph, pw = picked.shape[2], picked.shape[3]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    out[:, :, :ph, :pw] = picked

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[:, :, offset::2, offset::2] = g[:, :, :ph, :pw]
        return (dx,)

    return _make(out, (x,), bw, "subsample")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    _record("gap", flops=0, reads=x.size, writes=n * c)
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),), "gap")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T (+ b) with ``w`` laid out ``out x in``."""
    from .tensor import add_bias, matmul, transpose

    _record("linear", flops=x.shape[0] * w.size, reads=x.size + w.size, writes=x.shape[0] * w.shape[0])
    out = matmul(x, transpose(w))
    return add_bias(out, b) if b is not None else out


def relu_op(x: Tensor) -> Tensor:
    _record("relu", reads=x.size, writes=x.size, elementwise=True)
    return relu(x)


def sum_op(tensors: Sequence[Tensor]) -> Tensor:
    for t in tensors[1:]:
        _record("add", reads=2 * t.size, writes=t.size, elementwise=True)
    return add_n(list(tensors))


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    gain: Parameter
    bias: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @property
    def channels(self) -> int:
        return self.gain.shape[0]


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization followed by the affine gain/bias.

    In training mode the batch statistics are used and the running buffers
    move towards them by ``1 - momentum``.
    """
    n, c, h, w = x.shape
    if c != state.channels:
        raise ValueError(f"batch_norm: input has {c} channels, state has {state.channels}")
    _record("bn", reads=x.size, writes=x.size, elementwise=True)
    xd = x.data
    gain, bias = state.gain, state.bias
    gd = gain.data[None, :, None, None]
    if training:
        m = n * h * w
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
        unbiased = var * (m / max(m - 1, 1))
        mom = state.momentum
        state.running_mean[...] = mom * state.running_mean + (1 - mom) * mean
        state.running_var[...] = mom * state.running_var + (1 - mom) * unbiased

        def bw(g):
            dgain = (g * xhat).sum(axis=(0, 2, 3))
            dbias = g.sum(axis=(0, 2, 3))
            dxhat = g * gd
            dx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
            return dx, dgain, dbias
    else:
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(xd.dtype)
        xhat = (xd - state.running_mean[None, :, None, None]) * inv[None, :, None, None]

        def bw(g):
            return (
                g * gd * inv[None, :, None, None],
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

    out = (xhat * gd + bias.data[None, :, None, None]).astype(xd.dtype)
    return _make(out, (x, gain, bias), bw, "batch_norm")


# ---------------------------------------------------------------------------
# channel plumbing


def channel_split(x: Tensor) -> tuple[Tensor, Tensor]:
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"channel_split: channel count {c} is odd")
    k = c // 2
    return slice_axis(x, 1, 0, k), slice_axis(x, 1, k, c)


def channel_concat(parts: Sequence[Tensor]) -> Tensor:
    return concat(parts, axis=1)


def shuffle_permutation(channels: int, groups: int = 2) -> np.ndarray:
    """Output channel ``i`` reads input channel ``perm[i]``."""
    if channels % groups:
        raise ValueError(f"channel_shuffle: {channels} channels not divisible by {groups} groups")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x: Tensor, groups: int = 2) -> Tensor:
    perm = shuffle_permutation(x.shape[1], groups)
    _record("shuffle", reads=x.size, writes=x.size)
    return index_select(x, 1, perm)


# ---------------------------------------------------------------------------
# parameter registry and parametrized blocks


class Registry:
    """Owns every parameter and batch-norm buffer of one model, keyed by path."""

    def __init__(self, rng: np.random.Generator, dtype=None):
        self.rng = rng
        self.dtype = dtype or get_default_dtype()
        self.params: dict[str, Parameter] = {}
        self.bn: dict[str, BatchNormState] = {}

    def weight(self, key: str, shape: tuple[int, ...], fan_in: int) -> Parameter:
        if key in self.params:
            raise KeyError(f"duplicate parameter key {key}")
        std = math.sqrt(2.0 / fan_in)
        p = Parameter(self.rng.standard_normal(shape) * std, key, dtype=self.dtype)
        self.params[key] = p
        return p

    def zeros(self, key: str, shape: tuple[int, ...]) -> Parameter:
        if key in self.params:
            raise KeyError(f"duplicate parameter key {key}")
        p = Parameter(np.zeros(shape), key, dtype=self.dtype)
        self.params[key] = p
        return p

    def batch_norm(self, key: str, channels: int) -> BatchNormState:
        gain = Parameter(np.ones(channels), f"{key}/gain", dtype=self.dtype)
        bias = Parameter(np.zeros(channels), f"{key}/bias", dtype=self.dtype)
        for p in (gain, bias):
            if p.unique_id in self.params:
                raise KeyError(f"duplicate parameter key {p.unique_id}")
            self.params[p.unique_id] = p
        state = BatchNormState(gain, bias, np.zeros(channels, dtype=self.dtype), np.ones(channels, dtype=self.dtype))
        self.bn[key] = state
        return state

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for key, st in self.bn.items():
            out[f"{key}/running_mean"] = st.running_mean
            out[f"{key}/running_var"] = st.running_var
        return out

    def count(self) -> int:
        return sum(p.size for p in self.params.values())


class ConvBN:
    """relu -> k x k dense conv -> batch-norm (the stem skips the relu)."""

    def __init__(self, reg: Registry, key: str, c_in: int, c_out: int, kernel: int = 1, pre_relu: bool = True):
        self.w = reg.weight(f"{key}/w", (c_out, c_in, kernel, kernel), fan_in=c_in * kernel * kernel)
        self.bn = reg.batch_norm(f"{key}/bn", c_out)
        self.pre_relu = pre_relu

    def __call__(self, x: Tensor, training: bool, stride: int = 1) -> Tensor:
        if self.pre_relu:
            x = relu_op(x)
        return batch_norm(conv2d(x, self.w, stride), self.bn, training)


class SepConv:
    """Two repetitions of relu -> depthwise k x k -> pointwise 1x1 -> batch-norm."""

    def __init__(self, reg: Registry, key: str, channels: int, kernel: int):
        self.kernel = kernel
        self.stages = []
        for r in range(2):
            dw = reg.weight(f"{key}/dw{r}", (channels, 1, kernel, kernel), fan_in=kernel * kernel)
            pw = reg.weight(f"{key}/pw{r}", (channels, channels, 1, 1), fan_in=channels)
            bn = reg.batch_norm(f"{key}/bn{r}", channels)
            self.stages.append((dw, pw, bn))

    def __call__(self, x: Tensor, training: bool, stride: int = 1) -> Tensor:
        for r, (dw, pw, bn) in enumerate(self.stages):
            x = relu_op(x)
            x = depthwise_conv2d(x, dw, stride if r == 0 else 1)
            x = batch_norm(conv2d(x, pw), bn, training)
        return x


class FactorizedReduction:
    """Two pixel-offset stride-2 1x1 convs, each producing half the output channels."""

    def __init__(self, reg: Registry, key: str, c_in: int, c_out: int):
        if c_out % 2:
            raise ValueError(f"factorized_reduction: output channels {c_out} must be even")
        half = c_out // 2
        self.w1 = reg.weight(f"{key}/w1", (half, c_in, 1, 1), fan_in=c_in)
        self.w2 = reg.weight(f"{key}/w2", (half, c_in, 1, 1), fan_in=c_in)
        self.bn = reg.batch_norm(f"{key}/bn", c_out)

    def __call__(self, x: Tensor, training: bool, stride: int = 2) -> Tensor:
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ValueError(f"factorized_reduction needs H, W >= 2, got {x.shape[2:]}")
        a = conv2d(subsample(x, 0), self.w1)
        b = conv2d(subsample(x, 1), self.w2)
        return batch_norm(channel_concat([a, b]), self.bn, training)


def factorized_reduction(reg: Registry, key: str, c_in: int, c_out: int) -> FactorizedReduction:
    return FactorizedReduction(reg, key, c_in, c_out)


# ---------------------------------------------------------------------------
# candidate operations

PARAMETRIZED_OPS = (OperationId.SEP3, OperationId.SEP5, OperationId.CONV1)


def make_candidate(reg: Registry, key: str, op: OperationId, channels: int, reducing: bool = False):
    """Allocate weights for ``op`` at ``channels`` width.

    ``reducing`` marks a position that may run at stride 2, where IDENTITY
    becomes a factorized reduction. Returns ``None`` for weightless ops.
    """
    op = OperationId(op)
    if op is OperationId.SEP3:
        return SepConv(reg, key, channels, 3)
    if op is OperationId.SEP5:
        return SepConv(reg, key, channels, 5)
    if op is OperationId.CONV1:
        return ConvBN(reg, key, channels, channels, 1)
    if op is OperationId.IDENTITY and reducing:
        return FactorizedReduction(reg, key, channels, channels)
    return None


def apply_candidate_op(op, x: Tensor, stride: int, module=None, training: bool = False, avg_pool: bool = False) -> Tensor:
    """Run candidate ``op`` on ``x``; ``module`` holds its weights if it has any."""
    try:
        op = OperationId(op)
    except ValueError:
        raise ValueError(f"unknown operation code {op!r}") from None
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    record_node()
    if op in PARAMETRIZED_OPS:
        if module is None:
            raise ValueError(f"{op.name} needs weights")
        return module(x, training, stride)
    if op is OperationId.IDENTITY:
        if stride == 1:
            return x
        if module is None:
            raise ValueError("IDENTITY at stride 2 needs factorized-reduction weights")
        return module(x, training)
    if op is OperationId.MAXPOOL3:
        return max_pool3(x, stride)
    return avg_pool3(x, stride) if avg_pool else min_pool3(x, stride)


def sep_conv_params(channels: int, kernel: int) -> int:
    return 2 * (kernel * kernel * channels + channels * channels + 2 * channels)


# ---------------------------------------------------------------------------
# drop-path


def drop_path(outputs: Sequence[Tensor], keep_prob: float, training: bool, rng: np.random.Generator) -> list[Tensor]:
    """Keep each branch with ``keep_prob`` (rescaled), zero it otherwise.

    If every branch loses the coin flip, one branch chosen uniformly at
    random survives so the cell output is never identically zero.
    """
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    outputs = list(outputs)
    if not training or keep_prob == 1:
        return outputs
    keep = rng.random(len(outputs)) < keep_prob
    if not keep.any():
        keep[rng.integers(len(outputs))] = True
    out = []
    for t, k in zip(outputs, keep):
        _record("drop_path", reads=t.size, writes=t.size, elementwise=True)
        out.append(scale(t, 1.0 / keep_prob if k else 0.0))
    return out
