"""Learning-rate schedule, the alternating search loop and from-scratch training."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import genotype as gt
from .controller import Controller, ControllerConfig, reward_of
from .data import ChannelStats, Dataset, augment, channel_stats, iterate_batches, normalize
from .genotype import Genotype
from .optim import SGD, clip_grad_norm
from .supernet import ModelConfig, Network
from .tensor import backward, default_dtype, load_arrays, no_grad, save_arrays, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainSchedule:
    T0: int = 10
    T_mult: int = 2
    cycles: int = 6
    lr_max: float = 0.05
    lr_min: float = 5e-4
    batch_size: int = 144

    @property
    def total_epochs(self) -> int:
        return sum(self.T0 * self.T_mult**i for i in range(self.cycles))

    def restarts(self) -> list[int]:
        """Epochs at which each cycle ends (and the next restarts)."""
        out, edge = [], 0
        for i in range(self.cycles):
            edge += self.T0 * self.T_mult**i
            out.append(edge)
        return out


def cosine_lr(epoch: float, schedule: TrainSchedule, lr_max: float | None = None,
              lr_min: float | None = None) -> float:
    """Cosine annealing with warm restarts at a (possibly fractional) epoch."""
    hi = schedule.lr_max if lr_max is None else lr_max
    lo = schedule.lr_min if lr_min is None else lr_min
    if epoch < 0 or epoch >= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside the schedule [0, {schedule.total_epochs})")
    start, length = 0, schedule.T0
    while epoch >= start + length:
        start += length
        length *= schedule.T_mult
    t = epoch - start
    return lo + 0.5 * (hi - lo) * (1 + math.cos(math.pi * t / length))


# ---------------------------------------------------------------------------
# prepared data


@dataclass
class PreparedData:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray | None = None
    test_y: np.ndarray | None = None
    stats: ChannelStats | None = None

    @classmethod
    def from_datasets(cls, train: Dataset, val: Dataset, test: Dataset | None = None, dtype=np.float32):
        stats = channel_stats(train)
        return cls(
            normalize(train.images, stats, dtype), train.labels,
            normalize(val.images, stats, dtype), val.labels,
            normalize(test.images, stats, dtype) if test is not None else None,
            test.labels if test is not None else None,
            stats,
        )


def evaluate_error(net: Network, images: np.ndarray, labels: np.ndarray, batch_size: int = 256,
                   genotype: Genotype | None = None) -> float:
    wrong = 0
    with no_grad():
        for idx in iterate_batches(len(labels), batch_size):
            logits = net.forward(images[idx], genotype, training=False).data
            wrong += int(np.sum(logits.argmax(axis=1) != labels[idx]))
    return wrong / len(labels)


def train_epoch(net: Network, g: Genotype | None, data: PreparedData, sgd: SGD, schedule: TrainSchedule,
                epoch: int, rngs: dict[str, np.random.Generator], grad_clip: float, cutout: bool,
                augment_data: bool = True) -> float:
    """One pass over the train split with per-step cosine annealing; returns mean loss."""
    n = len(data.train_y)
    steps = math.ceil(n / schedule.batch_size)
    losses = []
    for step, idx in enumerate(iterate_batches(n, schedule.batch_size, rngs["data"])):
        x = data.train_x[idx]
        if augment_data:
            x = augment(x, rngs["data"], cutout)
        lr = cosine_lr(epoch + step / steps, schedule)
        logits = net.forward(x, g, training=True, rng=rngs["drop"])
        loss = softmax_cross_entropy(logits, data.train_y[idx])
        sgd.zero_grad()
        backward(loss)
        clip_grad_norm(sgd.params, grad_clip)
        sgd.step(lr)
        losses.append(float(loss.data))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# search


@dataclass
class SearchConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    epochs: int | None = None  # defaults to the full schedule
    samples_per_epoch: int = 10
    val_batch_size: int = 144
    weight_phase: str = "fresh"  # "fresh" | "best"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    cutout: bool = False
    augment: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.controller.B != self.model.B:
            self.controller = ControllerConfig(**{**asdict(self.controller), "B": self.model.B})

    @property
    def total_epochs(self) -> int:
        return self.epochs if self.epochs is not None else self.schedule.total_epochs

    @property
    def controller_lr_min(self) -> float:
        # the controller anneals over the same cycles, scaled by the weight schedule's ratio
        return self.controller.lr * self.schedule.lr_min / self.schedule.lr_max


_STREAMS = ("model", "controller", "sample", "data", "drop")


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}


class SearchState:
    """Supernet, controller, optimizers, random streams and the per-epoch log."""

    def __init__(self, config: SearchConfig):
        config.model.validate()
        if config.weight_phase not in ("fresh", "best"):
            raise ValueError(f"weight_phase must be 'fresh' or 'best', got {config.weight_phase!r}")
        if config.total_epochs > config.schedule.total_epochs:
            raise ValueError(f"{config.total_epochs} epochs exceed the schedule's {config.schedule.total_epochs}")
        self.config = config
        self.dtype = np.dtype(config.dtype).type
        self.rngs = make_rngs(config.seed)
        with default_dtype(self.dtype):
            self.net = Network(config.model, None, rng=self.rngs["model"])
        self.controller = Controller(config.controller, seed=int(self.rngs["controller"].integers(2**31)))
        self.sgd = SGD(self.net.parameters(), config.momentum, config.weight_decay, nesterov=True)
        self.epoch = 0
        self.history: list[dict] = []

    # -- checkpoint ----------------------------------------------------------

    def save(self, path) -> None:
        arrays = {f"net/{k}": v for k, v in self.net.state_dict().items()}
        arrays.update(self.sgd.state_arrays("net_sgd"))
        arrays.update(self.controller.state_arrays())
        meta = {
            "epoch": self.epoch,
            "history": self.history,
            "rngs": {k: g.bit_generator.state for k, g in self.rngs.items()},
            "config": search_config_to_dict(self.config),
        }
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path) -> "SearchState":
        arrays = load_arrays(path)
        meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
        state = cls(search_config_from_dict(meta["config"]))
        state.net.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("net/")})
        state.sgd.load_state_arrays(arrays, "net_sgd")
        state.controller.load_state_arrays(arrays)
        for k, s in meta["rngs"].items():
            state.rngs[k].bit_generator.state = s
        state.epoch = meta["epoch"]
        state.history = meta["history"]
        return state


def search_config_to_dict(cfg: SearchConfig) -> dict:
    return asdict(cfg)


def search_config_from_dict(d: dict) -> SearchConfig:
    d = dict(d)
    return SearchConfig(
        model=ModelConfig(**d.pop("model")),
        schedule=TrainSchedule(**d.pop("schedule")),
        controller=ControllerConfig(**d.pop("controller")),
        **d,
    )


def search_epoch(state: SearchState, data: PreparedData) -> dict:
    """Controller phase (sample, score, one REINFORCE step) then one weight-training epoch."""
    cfg = state.config
    epoch = state.epoch
    net, ctl = state.net, state.controller
    ctrl_lr = cosine_lr(epoch, cfg.schedule, cfg.controller.lr, cfg.controller_lr_min)

    samples = ctl.sample(state.rngs["sample"], cfg.samples_per_epoch)
    n_val = len(data.val_y)
    bs = min(cfg.val_batch_size, n_val)
    n_batches = max(n_val // bs, 1)
    for i, (g, trace) in enumerate(samples):
        b = (epoch * cfg.samples_per_epoch + i) % n_batches
        sl = slice(b * bs, (b + 1) * bs)
        trace.reward = reward_of(net, g, data.val_x[sl], data.val_y[sl])
    stats = ctl.reinforce_update([t for _, t in samples], lr=ctrl_lr)

    if cfg.weight_phase == "best":
        g_train = max(samples, key=lambda s: s[1].reward)[0]
    else:
        g_train = ctl.sample_one(state.rngs["sample"])[0]
    train_loss = train_epoch(net, g_train, data, state.sgd, cfg.schedule, epoch, state.rngs,
                             cfg.grad_clip, cfg.cutout, cfg.augment)
    row = {
        "epoch": epoch,
        "reward": stats["mean_reward"],
        "baseline": stats["baseline"],
        "entropy": stats["entropy"],
        "train_loss": train_loss,
        "lr": cosine_lr(epoch, cfg.schedule),
        "ctrl_lr": ctrl_lr,
        "genotype": gt.encode(g_train).strip().replace("\n", " ; "),
    }
    state.history.append(row)
    state.epoch += 1
    log.info("epoch %d reward %.4f baseline %.4f loss %.4f", epoch, row["reward"], row["baseline"], train_loss)
    return row


def search(config: SearchConfig, data: PreparedData, state: SearchState | None = None,
           stop_after: int | None = None, checkpoint_path=None) -> SearchState:
    """Run (or resume) the search until ``config.total_epochs`` or ``stop_after`` epochs."""
    state = state or SearchState(config)
    end = config.total_epochs if stop_after is None else min(stop_after, config.total_epochs)
    while state.epoch < end:
        search_epoch(state, data)
        if checkpoint_path is not None:
            state.save(checkpoint_path)
    return state


HISTORY_FIELDS = ("epoch", "reward", "baseline", "entropy", "train_loss", "lr", "ctrl_lr", "genotype")


def write_history(rows: list[dict], path, fields=HISTORY_FIELDS) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items() if k in fields})


def score_genotype(net: Network, g: Genotype, data: PreparedData, batches: int, batch_size: int) -> float:
    n_val = len(data.val_y)
    bs = min(batch_size, n_val)
    n_batches = max(n_val // bs, 1)
    scores = []
    for b in range(min(batches, n_batches)):
        sl = slice(b * bs, (b + 1) * bs)
        scores.append(reward_of(net, g, data.val_x[sl], data.val_y[sl]))
    return float(np.mean(scores))


def derive_best(state: SearchState, data: PreparedData, k: int = 100, batches: int = 10,
                scorer=None) -> tuple[Genotype, list[tuple[Genotype, float]]]:
    """Sample ``k`` cells from the trained controller and keep the best scorer (first on ties)."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    samples = state.controller.sample(state.rngs["sample"], k)
    if scorer is None:
        def scorer(g):
            return score_genotype(state.net, g, data, batches, state.config.val_batch_size)
    scored = [(g, scorer(g)) for g, _ in samples]
    best = 0
    for i, (_, s) in enumerate(scored):
        if s > scored[best][1]:
            best = i
    return scored[best][0], scored


# ---------------------------------------------------------------------------
# final training


FINAL_FIELDS = ("epoch", "train_loss", "val_error", "test_error", "lr")


def train_final(g: Genotype, config: ModelConfig, schedule: TrainSchedule, data: PreparedData, epochs: int,
                seed: int = 0, cutout: bool = False, momentum: float = 0.9, weight_decay: float = 1e-4,
                grad_clip: float = 5.0, dtype=np.float32, augment_data: bool = True,
                eval_batch_size: int = 256) -> tuple[Network, dict]:
    """Train ``g`` from scratch; test error is averaged over the last five epochs."""
    if epochs > schedule.total_epochs:
        raise ValueError(f"{epochs} epochs exceed the schedule's {schedule.total_epochs}")
    rngs = make_rngs(seed)
    with default_dtype(dtype):
        net = Network(config, g, rng=rngs["model"])
    sgd = SGD(net.parameters(), momentum, weight_decay, nesterov=True)
    rows = []
    for epoch in range(epochs):
        loss = train_epoch(net, None, data, sgd, schedule, epoch, rngs, grad_clip, cutout, augment_data)
        row = {"epoch": epoch, "train_loss": loss, "lr": cosine_lr(epoch, schedule)}
        row["val_error"] = evaluate_error(net, data.val_x, data.val_y, eval_batch_size)
        if data.test_x is not None:
            row["test_error"] = evaluate_error(net, data.test_x, data.test_y, eval_batch_size)
        rows.append(row)
        log.info("final epoch %d loss %.4f val %.4f", epoch, loss, row["val_error"])
    tail = [r["test_error"] for r in rows[-5:] if "test_error" in r]
    metrics = {
        "rows": rows,
        "final_test_error": float(np.mean(tail)) if tail else None,
        "final_val_error": float(np.mean([r["val_error"] for r in rows[-5:]])),
        "params": net.registry.count(),
    }
    return net, metrics


def save_model(net: Network, path, extra: dict | None = None) -> None:
    """Write weights, buffers, config and genotype; ``extra`` is stored verbatim as JSON."""
    meta = {"config": asdict(net.config), "genotype": gt.encode(net.genotype) if net.genotype else None,
            "extra": extra or {}}
    arrays = dict(net.state_dict())
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    save_arrays(path, arrays)


def load_model(path, with_extra: bool = False):
    arrays = load_arrays(path)
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    config = ModelConfig(**meta["config"])
    g = gt.decode(meta["genotype"]) if meta["genotype"] else None
    dtype = next(iter(arrays.values())).dtype.type
    with default_dtype(dtype):
        net = Network(config, g)
    net.load_state_dict(arrays)
    return (net, meta.get("extra", {})) if with_extra else net
