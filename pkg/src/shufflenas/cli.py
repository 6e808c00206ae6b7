"""Command-line entry point: search, train, eval, analyze, bench, genotype.

Every command resolves its flags into a :class:`RunConfig`, writes it to
``<out-dir>/config.txt`` and only then starts work.  ``--config FILE`` reloads
a previous run's config; flags given explicitly override its values.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import genotype as gt
from .analysis import EnasStub, emit_graph, estimate_costs, latency_benchmark, report_rows, rows_to_csv
from .data import (
    DATA_DIR_ENV,
    SYNTHETIC_KINDS,
    ChannelStats,
    Dataset,
    default_data_dir,
    load_cifar10,
    normalize,
    synthetic_dataset,
)
from .supernet import BYPASS_MODES, MERGE_MODES, ModelConfig, Network
from .tensor import default_dtype
from .train import (
    FINAL_FIELDS,
    PreparedData,
    SearchConfig,
    SearchState,
    TrainSchedule,
    derive_best,
    evaluate_error,
    load_model,
    save_model,
    search,
    train_final,
    write_history,
)

log = logging.getLogger("shufflenas")

COMMANDS = ("search", "train", "eval", "analyze", "bench", "genotype")
MAC_NOTE = ("# flops = multiply-accumulates; mac = activation reads + activation writes + weight reads, "
            "each element counted once per op; nodes = op nodes in cells plus shortcuts/calibrations")


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


@dataclass
class RunConfig:
    command: str = "search"
    # model
    B: int = 5
    N: int = 5
    filters: int = 36
    num_classes: int = 10
    merge_mode: str = "sum"
    cell_bn: bool = False
    bypass_mode: str = "factorized"
    drop_path_keep: float = 0.9
    avg_pool_for_min: bool = False
    # schedule and optimizer
    T0: int = 10
    T_mult: int = 2
    cycles: int = 6
    lr_max: float = 0.05
    lr_min: float = 5e-4
    batch_size: int = 144
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    epochs: int = 630
    # search
    samples_per_epoch: int = 10
    val_batch_size: int = 144
    weight_phase: str = "fresh"
    derive_k: int = 100
    derive_batches: int = 10
    # data
    data_dir: str = ""
    synthetic: str = ""
    synthetic_classes: int = 4
    train_size: int = 0  # 0 keeps the whole split
    val_size: int = 0
    test_size: int = 0
    cutout: bool = False
    augment: bool = True
    # run
    seed: int = 0
    precision: int = 32
    out_dir: str = "run"
    genotype: str = ""
    checkpoint: str = ""
    resume: bool = False
    # analysis
    batches: list = field(default_factory=lambda: [1, 8, 32, 64])
    iters: int = 1000
    warmup: int = 50
    threads: int = 1
    compare_enas: bool = False
    dot: bool = False
    dot_file: str = ""
    # genotype tool
    action: str = "show"
    target_B: int = 0

    def to_text(self) -> str:
        lines = [f"# shufflenas {__version__} run configuration"]
        lines += [f"{f.name} = {json.dumps(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise UsageError(f"config line {lineno}: cannot parse {raw!r}")
            try:
                values[key] = json.loads(value)
            except json.JSONDecodeError as exc:
                raise UsageError(f"config line {lineno}: bad value for {key}: {exc}") from None
        return cls(**values)

    def model_config(self) -> ModelConfig:
        return ModelConfig(B=self.B, N=self.N, filters=self.filters, num_classes=self.num_classes,
                           merge_mode=self.merge_mode, cell_bn=self.cell_bn, bypass_mode=self.bypass_mode,
                           drop_path_keep=self.drop_path_keep, avg_pool_for_min=self.avg_pool_for_min)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(T0=self.T0, T_mult=self.T_mult, cycles=self.cycles, lr_max=self.lr_max,
                             lr_min=self.lr_min, batch_size=self.batch_size)

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


# ---------------------------------------------------------------------------
# argument parsing


def _batch_list(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None
    if not out or any(b <= 0 for b in out):
        raise argparse.ArgumentTypeError(f"batch sizes must be positive, got {text!r}")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shufflenas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    # every flag defaults to None so that config-file values survive unless overridden
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("model")
    g.add_argument("--B", type=int, help="blocks per cell")
    g.add_argument("--N", type=int, help="normal cells per stage")
    g.add_argument("--filters", type=int, help="stem output channels f")
    g.add_argument("--merge-mode", choices=MERGE_MODES)
    g.add_argument("--cell-bn", action="store_const", const=True, help="batch-norm after the loose-end sum")
    g.add_argument("--bypass-mode", choices=BYPASS_MODES)
    g.add_argument("--drop-path-keep", type=float, help="default 0.9, or 0.5 with --cell-bn")
    g.add_argument("--avg-pool-for-min", action="store_const", const=True,
                   help="run MINPOOL3 choices as 3x3 average pooling")
    g = common.add_argument_group("data")
    g.add_argument("--data-dir", help=f"CIFAR-10 binary directory (default ${DATA_DIR_ENV})")
    g.add_argument("--synthetic", nargs="?", const="striped_patterns", choices=SYNTHETIC_KINDS,
                   help="use a generated dataset instead of CIFAR-10")
    g.add_argument("--synthetic-classes", type=int)
    g.add_argument("--train-size", type=int, help="use only the first N training images")
    g.add_argument("--val-size", type=int)
    g.add_argument("--test-size", type=int)
    g.add_argument("--cutout", action="store_const", const=True, help="16x16 Cutout augmentation")
    g.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    g = common.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr-max", type=float)
    g.add_argument("--lr-min", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--grad-clip", type=float)
    g.add_argument("--samples-per-epoch", type=int)
    g.add_argument("--val-batch-size", type=int)
    g.add_argument("--weight-phase", choices=("fresh", "best"))
    g.add_argument("--derive-k", type=int)
    g.add_argument("--derive-batches", type=int)
    g = common.add_argument_group("run")
    g.add_argument("--seed", type=int)
    g.add_argument("--precision", type=int, choices=(32, 64), help="64 gives bit-exact replays")
    g.add_argument("--out-dir", help="run directory (default ./run)")
    g.add_argument("--config", help="start from a saved config.txt")
    g.add_argument("--genotype", help="genotype text file, or shufflenasnet-a / shufflenasnet-b")
    g.add_argument("--checkpoint", help="model checkpoint (eval; default <out-dir>/checkpoint.bin)")
    g.add_argument("--resume", action="store_const", const=True, help="continue a search from its checkpoint")
    g.add_argument("-v", "--verbose", action="store_true")
    g = common.add_argument_group("analysis")
    g.add_argument("--batch", dest="batches", type=_batch_list, help="comma separated batch sizes")
    g.add_argument("--iters", type=int, help="timed forward passes per batch size")
    g.add_argument("--warmup", type=int)
    g.add_argument("--threads", type=int, help="BLAS threads; 0 leaves the pool alone")
    g.add_argument("--compare-enas", action="store_const", const=True, help="add the ENAS-layout stub")
    g.add_argument("--dot", action="store_const", const=True, help="print the DOT graph instead of the CSV")
    g.add_argument("--dot-file", help="also write the DOT graph here")

    sub.add_parser("search", parents=[common], help="weight-sharing search, then derive the best cell")
    sub.add_parser("train", parents=[common], help="train a genotype from scratch")
    sub.add_parser("eval", parents=[common], help="test error of a saved model")
    sub.add_parser("analyze", parents=[common], help="parameter, FLOP and MAC report")
    sub.add_parser("bench", parents=[common], help="forward-pass latency table")
    p = sub.add_parser("genotype", parents=[common], help="inspect, generate or convert genotypes")
    p.add_argument("action", choices=("show", "random", "embed", "export"),
                   help="show FILE, random --B, embed --to B, export a checkpoint's genotype")
    p.add_argument("--to", dest="target_B", type=int, help="target block count for embed")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, an optional config file and explicit flags into one RunConfig."""
    path = Path(args.config) if args.config else None
    if path is None and (getattr(args, "resume", False) or args.command == "eval"):
        # continuing or evaluating a run reuses that run's settings
        saved = Path(args.out_dir or RunConfig().out_dir) / "config.txt"
        path = saved if saved.exists() else None
    if path is not None:
        if not path.exists():
            raise UsageError(f"--config: no such file {path}")
        base = RunConfig.from_text(path.read_text(encoding="utf-8"))
    else:
        base = RunConfig()
    values = asdict(base)
    values["command"] = args.command
    for name in values:
        given = getattr(args, name, None)
        if given is not None:
            values[name] = given
    if path is None:
        # fill defaults that depend on other flags
        if args.drop_path_keep is None:
            values["drop_path_keep"] = 0.5 if values["cell_bn"] else 0.9
        if not values["data_dir"] and not values["synthetic"]:
            values["data_dir"] = default_data_dir() or ""
    cfg = RunConfig(**values)
    if cfg.synthetic:
        cfg.num_classes = 2 if cfg.synthetic == "two_gaussians_images" else cfg.synthetic_classes
    else:
        cfg.num_classes = 10
    try:
        cfg.model_config().validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for name in ("epochs", "iters", "batch_size", "derive_k", "samples_per_epoch", "val_batch_size"):
        if getattr(cfg, name) <= 0:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    if cfg.epochs > cfg.schedule().total_epochs:
        raise UsageError(f"--epochs {cfg.epochs} exceeds the schedule length {cfg.schedule().total_epochs}")
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _load_genotype(cfg: RunConfig, required: bool = True) -> gt.Genotype | None:
    if not cfg.genotype:
        if required:
            raise UsageError("--genotype is required for this command")
        return None
    if cfg.genotype.lower() in gt.SHIPPED:
        g = gt.shipped(cfg.genotype)
    else:
        path = Path(cfg.genotype)
        if not path.exists():
            raise UsageError(f"--genotype: no such file {path}")
        try:
            g = gt.load(path)
        except gt.GenotypeDecodeError as exc:
            raise UsageError(f"--genotype {path}: {exc}") from None
    for cell in g.cells():
        errors = gt.validate(cell)
        if errors:
            raise UsageError(f"--genotype: invalid {cell.cell_type} cell: {'; '.join(errors)}")
    if g.B != cfg.B:
        raise UsageError(f"--genotype has B={g.B} but --B is {cfg.B}")
    return g


def _check_data(cfg: RunConfig) -> None:
    if cfg.synthetic:
        return
    if not cfg.data_dir:
        raise UsageError(f"no data: pass --data-dir (or set {DATA_DIR_ENV}) or use --synthetic")
    if not Path(cfg.data_dir).is_dir():
        raise UsageError(f"--data-dir: {cfg.data_dir} is not a directory")


def _load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    _check_data(cfg)
    if cfg.synthetic:
        rng = np.random.default_rng(cfg.seed + 1_000_003)
        train = synthetic_dataset(cfg.synthetic, cfg.train_size or 288, rng, "train", cfg.synthetic_classes)
        val = synthetic_dataset(cfg.synthetic, cfg.val_size or 144, rng, "val", cfg.synthetic_classes)
        test = synthetic_dataset(cfg.synthetic, cfg.test_size or 288, rng, "test", cfg.synthetic_classes)
    else:
        train, val, test = load_cifar10(cfg.data_dir)

        def cut(ds: Dataset, n: int) -> Dataset:
            return ds.subset(n) if n else ds
        train, val, test = cut(train, cfg.train_size), cut(val, cfg.val_size), cut(test, cfg.test_size)
    return train, val, test


def _load_data(cfg: RunConfig) -> PreparedData:
    return PreparedData.from_datasets(*_load_datasets(cfg), dtype=cfg.dtype)


def _write_config(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "config.txt"
    if target.exists():
        try:
            previous = RunConfig.from_text(target.read_text(encoding="utf-8")).command
        except (UsageError, TypeError):
            previous = None
        if previous != cfg.command:
            # keep the config of the run that produced this directory
            target = out / f"config.{cfg.command}.txt"
    target.write_text(cfg.to_text(), encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_search(cfg: RunConfig) -> int:
    _check_data(cfg)
    out = _write_config(cfg)
    data = _load_data(cfg)
    sc = SearchConfig(
        model=cfg.model_config(), schedule=cfg.schedule(), epochs=cfg.epochs,
        samples_per_epoch=cfg.samples_per_epoch, val_batch_size=cfg.val_batch_size,
        weight_phase=cfg.weight_phase, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        grad_clip=cfg.grad_clip, cutout=cfg.cutout, augment=cfg.augment, seed=cfg.seed,
        dtype=np.dtype(cfg.dtype).name,
    )
    ckpt = out / "checkpoint.bin"
    state = None
    if cfg.resume:
        if not ckpt.exists():
            raise UsageError(f"--resume: no checkpoint at {ckpt}")
        state = SearchState.load(ckpt)
        print(f"resuming at epoch {state.epoch}")
    with default_dtype(cfg.dtype):
        state = search(sc, data, state, checkpoint_path=ckpt)
        write_history(state.history, out / "history.csv")
        best, scored = derive_best(state, data, k=cfg.derive_k, batches=cfg.derive_batches)
    gt.save(best, out / "genotype.txt")
    score = max(s for _, s in scored)
    print(f"epochs {state.epoch}  last reward {state.history[-1]['reward']:.4f}  derived score {score:.4f}")
    print(gt.encode(best), end="")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    g = _load_genotype(cfg)
    _check_data(cfg)
    out = _write_config(cfg)
    data = _load_data(cfg)
    gt.save(g, out / "genotype.txt")
    net, metrics = train_final(g, cfg.model_config(), cfg.schedule(), data, cfg.epochs, seed=cfg.seed,
                               cutout=cfg.cutout, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                               grad_clip=cfg.grad_clip, dtype=cfg.dtype, augment_data=cfg.augment)
    write_history(metrics["rows"], out / "history.csv", FINAL_FIELDS)
    save_model(net, out / "checkpoint.bin", extra={
        "mean": data.stats.mean.tolist(), "std": data.stats.std.tolist()})
    print(f"params {metrics['params']}")
    print(f"final val error {metrics['final_val_error']:.4f}")
    if metrics["final_test_error"] is not None:
        print(f"final test error {metrics['final_test_error']:.4f}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    path = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / "checkpoint.bin"
    if not path.exists():
        raise UsageError(f"--checkpoint: no such file {path}")
    _check_data(cfg)
    _write_config(cfg)
    train, _, test = _load_datasets(cfg)
    net, extra = load_model(path, with_extra=True)
    if net.genotype is None:
        raise UsageError(f"{path} holds no standalone model")
    # normalize with the statistics the model was trained under
    if "mean" in extra:
        stats = ChannelStats(np.array(extra["mean"]), np.array(extra["std"]))
    else:
        stats = PreparedData.from_datasets(train, train).stats
    x = normalize(test.images, stats, net.registry.dtype)
    with default_dtype(net.registry.dtype):
        err = evaluate_error(net, x, test.labels)
    print(f"test error {err:.4f}  ({len(test.labels)} images)")
    return 0


def _models(cfg: RunConfig, g: gt.Genotype):
    with default_dtype(cfg.dtype):
        models = [("shufflenasnet", Network(cfg.model_config(), g, seed=cfg.seed))]
        if cfg.compare_enas:
            models.append(("enas_stub", EnasStub(cfg.model_config(), seed=cfg.seed)))
    return models


def cmd_analyze(cfg: RunConfig) -> int:
    g = _load_genotype(cfg)
    out = _write_config(cfg)
    models = _models(cfg, g)
    net = models[0][1]
    dot = emit_graph(net)
    if cfg.dot_file:
        Path(cfg.dot_file).write_text(dot, encoding="utf-8")
    if cfg.dot:
        sys.stdout.write(dot)
        return 0
    rows = []
    for name, model in models:
        rows += report_rows(name, model, None, g, batches=[1])
        report = estimate_costs(model, (1, 3, 32, 32), g)
        print(f"{name}: params {report.params}  nodes/cell {report.nodes_per_cell:.2f}  "
              f"max parallel {report.max_parallel}")
    text = MAC_NOTE + "\n" + rows_to_csv(rows)
    (out / "report.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    g = _load_genotype(cfg)
    out = _write_config(cfg)
    rows = []
    for name, model in _models(cfg, g):
        timings = latency_benchmark(model, cfg.batches, cfg.iters, cfg.warmup, g,
                                    threads=cfg.threads or None, seed=cfg.seed)
        rows += report_rows(name, model, timings, g)
    text = rows_to_csv(rows)
    (out / "bench.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_genotype(cfg: RunConfig) -> int:
    _write_config(cfg)
    if cfg.action == "random":
        g = gt.random_genotype(np.random.default_rng(cfg.seed), cfg.B)
    elif cfg.action == "export":
        path = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / "checkpoint.bin"
        if not path.exists():
            raise UsageError(f"--checkpoint: no such file {path}")
        net = load_model(path)
        if net.genotype is None:
            raise UsageError(f"{path} holds no standalone model")
        g = net.genotype
    else:
        g = _load_genotype(cfg)
        if cfg.action == "embed":
            if cfg.target_B < g.B:
                raise UsageError(f"--to must be at least the current B={g.B}")
            g = gt.embed_genotype(g, cfg.target_B)
    text = gt.encode(g)
    if cfg.dot:
        text = emit_graph(g)
    sys.stdout.write(text)
    if cfg.action != "show":
        gt.save(g, Path(cfg.out_dir) / "genotype.txt")
    if cfg.dot_file:
        Path(cfg.dot_file).write_text(emit_graph(g), encoding="utf-8")
    return 0


HANDLERS = {"search": cmd_search, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
            "bench": cmd_bench, "genotype": cmd_genotype}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if cfg.command == "genotype" and cfg.action in ("show", "embed") and not cfg.genotype:
            raise UsageError("--genotype is required for genotype show/embed")
        if cfg.genotype and args.B is None and not args.config:
            # without an explicit --B the genotype decides
            cfg.B = _peek_B(cfg.genotype)
        return HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"shufflenas {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report, do not dump a traceback
        log.debug("failure", exc_info=True)
        print(f"shufflenas {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _peek_B(source: str) -> int:
    try:
        if source.lower() in gt.SHIPPED:
            return gt.shipped(source).B
        return gt.load(source).B
    except FileNotFoundError:
        raise UsageError(f"--genotype: no such file {source}") from None
    except gt.GenotypeDecodeError as exc:
        raise UsageError(f"--genotype {source}: {exc}") from None


if __name__ == "__main__":
    sys.exit(main())
