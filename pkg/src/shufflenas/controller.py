"""Recurrent policy over genotypes, trained with REINFORCE.

One LSTM pass emits, for the normal cell and then the reduction cell, an
input index and an operation per block: ``2 * 2B`` decisions in total.
Each decision is embedded and fed back as the next input.  Index logits are
cut to the ``b`` legal choices of block ``b``, so illegal indices carry
exactly zero probability and block 1's forced choice has log-probability 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import genotype as gt
from .genotype import BlockSpec, CellGenotype, Genotype
from .ops import NUM_OPS, OperationId, Registry
from .optim import Adam
from .tensor import (
    Tensor,
    add,
    add_bias,
    backward,
    concat,
    default_dtype,
    embedding,
    exp,
    log_softmax,
    matmul,
    mul,
    no_grad,
    pick,
    scale,
    sigmoid,
    slice_axis,
    sub,
    sum_all,
    sum_axis,
    tanh,
)

HIDDEN = 100


@dataclass
class SampleTrace:
    decisions: list[int]
    log_probs: list[float]
    entropies: list[float]
    reward: float | None = None

    @property
    def log_prob(self) -> float:
        return float(sum(self.log_probs))

    @property
    def entropy(self) -> float:
        return float(sum(self.entropies))


@dataclass
class ControllerConfig:
    B: int = 5
    hidden: int = HIDDEN
    lr: float = 3.5e-4
    entropy_weight: float = 1e-4
    baseline_decay: float = 0.99
    temperature: float = 1.0


def decisions_to_genotype(decisions: list[int], B: int) -> Genotype:
    cells = []
    for c, cell_type in enumerate(gt.CELL_TYPES):
        chunk = decisions[c * 2 * B:(c + 1) * 2 * B]
        blocks = tuple(BlockSpec(chunk[2 * i], OperationId(chunk[2 * i + 1])) for i in range(B))
        cells.append(CellGenotype(cell_type, blocks))
    return Genotype(*cells)


def genotype_to_decisions(g: Genotype) -> list[int]:
    out = []
    for cell in g.cells():
        for b in cell.blocks:
            out.extend([b.input_index, int(b.op)])
    return out


class Controller:
    """LSTM controller with zero-initialised output heads (uniform at start)."""

    def __init__(self, config: ControllerConfig | None = None, seed: int = 0):
        self.config = cfg = config or ControllerConfig()
        if cfg.B < 1:
            raise ValueError(f"B must be >= 1, got {cfg.B}")
        # the policy always runs in float64: it is tiny and log-probabilities compare exactly
        with default_dtype(np.float64):
            reg = self.registry = Registry(np.random.default_rng(seed))
            h = cfg.hidden
            init = reg.rng.uniform
            self.w_lstm = self._uniform(reg, "ctrl/lstm/w", (2 * h, 4 * h), init, 0.1)
            self.b_lstm = reg.zeros("ctrl/lstm/b", (4 * h,))
            self.start = self._uniform(reg, "ctrl/start", (1, h), init, 0.1)
            self.idx_emb = self._uniform(reg, "ctrl/emb/index", (cfg.B, h), init, 0.1)
            self.op_emb = self._uniform(reg, "ctrl/emb/op", (NUM_OPS, h), init, 0.1)
            self.idx_w = reg.zeros("ctrl/head/index/w", (h, cfg.B))
            self.idx_b = reg.zeros("ctrl/head/index/b", (cfg.B,))
            self.op_w = reg.zeros("ctrl/head/op/w", (h, NUM_OPS))
            self.op_b = reg.zeros("ctrl/head/op/b", (NUM_OPS,))
        self.optimizer = Adam(self.parameters())
        self.baseline = 0.0

    @staticmethod
    def _uniform(reg: Registry, key, shape, init, bound):
        p = reg.zeros(key, shape)
        p.data = init(-bound, bound, size=shape)
        return p

    @property
    def B(self) -> int:
        return self.config.B

    def parameters(self):
        return list(self.registry.params.values())

    def _lstm(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        n = self.config.hidden
        z = add_bias(matmul(concat([x, h], axis=1), self.w_lstm), self.b_lstm)
        i = sigmoid(slice_axis(z, 1, 0, n))
        f = sigmoid(slice_axis(z, 1, n, 2 * n))
        o = sigmoid(slice_axis(z, 1, 2 * n, 3 * n))
        u = tanh(slice_axis(z, 1, 3 * n, 4 * n))
        c = add(mul(f, c), mul(i, u))
        return mul(o, tanh(c)), c

    def _run(self, batch: int, decisions: np.ndarray | None, rng: np.random.Generator | None,
             probs_out: list | None = None):
        """Unroll the policy; samples when ``decisions`` is None, else teacher-forces.

        Returns (decisions [batch x 4B], log-prob tensors, entropy tensors).
        ``probs_out`` collects each decision's probabilities, index rows zero-padded to B.
        """
        cfg = self.config
        with default_dtype(np.float64):
            zeros = np.zeros((batch, cfg.hidden))
            h, c = Tensor(zeros), Tensor(zeros)
            x = embedding(self.start, [0] * batch)
            chosen = np.zeros((batch, 4 * cfg.B), dtype=np.int64)
            log_probs, entropies = [], []
            step = 0
            for _cell in range(2):
                for pos in range(1, cfg.B + 1):
                    for kind in ("index", "op"):
                        h, c = self._lstm(x, h, c)
                        if kind == "index":
                            logits = slice_axis(add_bias(matmul(h, self.idx_w), self.idx_b), 1, 0, pos)
                        else:
                            logits = add_bias(matmul(h, self.op_w), self.op_b)
                        if cfg.temperature != 1.0:
                            logits = scale(logits, 1.0 / cfg.temperature)
                        logp = log_softmax(logits)
                        if probs_out is not None:
                            width = cfg.B if kind == "index" else NUM_OPS
                            full = np.zeros((batch, width))
                            full[:, :logp.shape[1]] = np.exp(logp.data)
                            probs_out.append(full)
                        if decisions is None:
                            probs = np.exp(logp.data)
                            u = rng.random(batch)
                            picks = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
                            picks = np.minimum(picks, probs.shape[1] - 1)
                        else:
                            picks = decisions[:, step]
                        chosen[:, step] = picks
                        log_probs.append(pick(logp, picks))
                        entropies.append(scale(sum_axis(mul(exp(logp), logp), 1), -1.0))
                        table = self.idx_emb if kind == "index" else self.op_emb
                        x = embedding(table, picks)
                        step += 1
        return chosen, log_probs, entropies

    def sample(self, rng: np.random.Generator, count: int = 1) -> list[tuple[Genotype, SampleTrace]]:
        with no_grad():
            chosen, lps, ents = self._run(count, None, rng)
        lp = np.stack([t.data for t in lps], axis=1)
        en = np.stack([t.data for t in ents], axis=1)
        out = []
        for i in range(count):
            decisions = [int(v) for v in chosen[i]]
            trace = SampleTrace(decisions, [float(v) for v in lp[i]], [float(v) for v in en[i]])
            out.append((decisions_to_genotype(decisions, self.B), trace))
        return out

    def sample_one(self, rng: np.random.Generator) -> tuple[Genotype, SampleTrace]:
        return self.sample(rng, 1)[0]

    def log_prob(self, genotypes: list[Genotype]) -> np.ndarray:
        """Total log-probability of each genotype under the current policy."""
        decisions = np.array([genotype_to_decisions(g) for g in genotypes], dtype=np.int64)
        with no_grad():
            _, lps, _ = self._run(len(genotypes), decisions, None)
        return np.stack([t.data for t in lps], axis=1).sum(axis=1)

    def distributions(self, g: Genotype) -> list[np.ndarray]:
        """Per-decision probabilities while teacher-forcing ``g``.

        Index rows span all ``B`` indices; positions the mask excludes are 0.
        """
        decisions = np.array([genotype_to_decisions(g)], dtype=np.int64)
        out = []
        with no_grad():
            self._run(1, decisions, None, out)
        return out

    def reinforce_update(self, traces: list[SampleTrace], lr: float | None = None) -> dict:
        """One Adam step on the averaged REINFORCE loss, then move the EMA baseline."""
        if not traces:
            raise ValueError("reinforce_update needs at least one trace")
        if any(t.reward is None for t in traces):
            raise ValueError("every trace needs a reward before the update")
        cfg = self.config
        lr = cfg.lr if lr is None else lr
        rewards = np.array([t.reward for t in traces], dtype=np.float64)
        advantage = rewards - self.baseline
        decisions = np.array([t.decisions for t in traces], dtype=np.int64)
        n = len(traces)
        _, lps, ents = self._run(n, decisions, None)
        with default_dtype(np.float64):
            total_lp = lps[0]
            for t in lps[1:]:
                total_lp = add(total_lp, t)
            total_ent = ents[0]
            for t in ents[1:]:
                total_ent = add(total_ent, t)
            pg = scale(sum_all(mul(total_lp, Tensor(advantage))), -1.0 / n)
            loss = sub(pg, scale(sum_all(total_ent), cfg.entropy_weight / n))
        self.optimizer.zero_grad()
        backward(loss)
        self.optimizer.step(lr)
        mean_reward = float(rewards.mean())
        self.baseline = cfg.baseline_decay * self.baseline + (1 - cfg.baseline_decay) * mean_reward
        return {
            "loss": float(loss.data),
            "mean_reward": mean_reward,
            "baseline": self.baseline,
            "entropy": float(total_ent.data.mean()),
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.registry.params.items()}
        out.update(self.optimizer.state_arrays("ctrl_adam"))
        out["ctrl/baseline"] = np.array([self.baseline], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for key, p in self.registry.params.items():
            p.data = arrays[key].astype(np.float64).copy()
        self.optimizer.load_state_arrays(arrays, "ctrl_adam")
        self.baseline = float(arrays["ctrl/baseline"][0])


def reward_of(net, g: Genotype, images: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy of ``g`` on one batch, evaluation mode."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("reward_of needs a non-empty batch")
    with no_grad():
        logits = net.forward(images, g, training=False).data
    return float(np.mean(logits.argmax(axis=1) == labels))
