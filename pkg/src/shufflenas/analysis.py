"""Parameter, FLOP and memory-access accounting, latency timing and DOT export.

Cost model (per forward pass, for the given input shape):

* ``flops``: multiply-accumulates.  Dense conv ``H*W*Cin*Cout*kh*kw``,
  depthwise ``H*W*C*kh*kw``, fully connected ``in*out``; times batch.
* ``mac``: memory accesses.  Every op counts each input element it reads,
  each weight it reads and each output element it writes, once.
* ``nodes``: operation nodes inside cells, plus reduction shortcuts and
  input calibration convolutions where a macro layout has them.
* ``elementwise``: number of element-wise tensor operations executed
  (ReLU, additions, batch-norm, drop-path scaling).

The counts come from tracing one evaluation-mode forward pass, so they are a
pure function of (genotype, config, input shape).
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import genotype as gt
from .genotype import CellGenotype, Genotype
from .ops import (
    ConvBN,
    FactorizedReduction,
    Registry,
    SepConv,
    avg_pool3,
    channel_concat,
    global_avg_pool,
    linear,
    max_pool3,
    record_node,
    relu_op,
    sum_op,
    trace_costs,
)
from .supernet import STAGES, ModelConfig, Network
from .tensor import Tensor, no_grad

CSV_FIELDS = ("model", "batch", "f", "N", "B", "params", "flops", "mac", "nodes", "elementwise",
              "median_ms", "mean_ms", "p95_ms")


@dataclass
class CostReport:
    params: int
    flops: int
    mac: int
    nodes: int
    nodes_per_cell: float
    max_parallel: int
    elementwise: int

    def as_dict(self) -> dict:
        return asdict(self)


def count_params(model) -> int:
    return int(sum(p.size for p in model.registry.params.values()))


def max_parallel_branches(cell: CellGenotype) -> int:
    """Largest number of blocks sitting at the same depth of the cell DAG."""
    depths = gt.block_depths(cell)
    return max(depths.count(d) for d in set(depths))


def estimate_costs(model, input_shape: Sequence[int], genotype: Genotype | None = None) -> CostReport:
    shape = tuple(input_shape)
    if len(shape) != 4 or any(not isinstance(s, (int, np.integer)) or s <= 0 for s in shape):
        raise ValueError(f"cost estimation needs a static N x C x H x W shape, got {input_shape!r}")
    x = np.zeros(shape, dtype=model.registry.dtype)
    with no_grad(), trace_costs() as rec:
        model.forward(x, genotype, training=False)
    cells = model.cell_count
    g = genotype or getattr(model, "genotype", None)
    return CostReport(
        params=count_params(model),
        flops=rec.flops,
        mac=rec.mac,
        nodes=rec.nodes,
        nodes_per_cell=rec.nodes / cells,
        max_parallel=model.max_parallel(g),
        elementwise=rec.elementwise,
    )


# ---------------------------------------------------------------------------
# NASNet/ENAS-layout comparison stub
#
# Built only for counting and timing, never trained.  Assumptions, read off
# the usual ENAS micro layout:
#   * every cell reads the two preceding cell outputs, each first calibrated
#     to the cell width by relu-1x1conv-BN (factorized reduction when the
#     older input is at twice the resolution);
#   * a block sums two ops, each on any earlier node (two inputs + blocks);
#   * ops: sep3, sep5, avg3, max3, identity;  reduction cells run stride 2 on
#     the two cell inputs, identity becoming a factorized reduction;
#   * the cell output concatenates all loose-end blocks;
#   * channel width doubles at each of the two reduction cells, the stem
#     emits ``f`` channels.

ENAS_OPS = ("sep3", "sep5", "avg3", "max3", "identity")

# published ENAS final cells, as (x_id, x_op, y_id, y_op) per block
ENAS_NORMAL_B5 = (0, 2, 0, 0, 0, 4, 0, 1, 0, 4, 1, 1, 1, 0, 0, 1, 0, 2, 1, 1)
ENAS_REDUCTION_B5 = (1, 0, 1, 0, 0, 3, 0, 2, 1, 1, 3, 1, 1, 0, 0, 4, 0, 3, 1, 1)


def enas_cells(B: int, seed: int = 0) -> tuple[list[tuple[int, int, int, int]], list[tuple[int, int, int, int]]]:
    """Normal and reduction block lists; the published cells at B=5, seeded random otherwise."""
    if B == 5:
        def blocks(arc):
            return [tuple(arc[i:i + 4]) for i in range(0, 20, 4)]
        return blocks(ENAS_NORMAL_B5), blocks(ENAS_REDUCTION_B5)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(2):
        cell = []
        for b in range(B):
            nodes = b + 2
            cell.append((int(rng.integers(nodes)), int(rng.integers(5)), int(rng.integers(nodes)), int(rng.integers(5))))
        out.append(cell)
    return out[0], out[1]


class _EnasCell:
    def __init__(self, reg: Registry, key: str, blocks, c_prev2: int, c_prev: int, width: int,
                 reduction: bool, prev2_reduce: bool):
        self.blocks = blocks
        self.reduction = reduction
        self.width = width
        self.cal2 = FactorizedReduction(reg, f"{key}/cal0", c_prev2, width) if prev2_reduce else (
            ConvBN(reg, f"{key}/cal0", c_prev2, width, 1))
        self.cal1 = ConvBN(reg, f"{key}/cal1", c_prev, width, 1)
        self.ops = {}
        for b, (xi, xo, yi, yo) in enumerate(blocks):
            for side, (idx, op) in enumerate(((xi, xo), (yi, yo))):
                k = f"{key}/block{b}/{side}"
                stride2 = reduction and idx < 2
                if ENAS_OPS[op] == "sep3":
                    self.ops[(b, side)] = SepConv(reg, k, width, 3)
                elif ENAS_OPS[op] == "sep5":
                    self.ops[(b, side)] = SepConv(reg, k, width, 5)
                elif ENAS_OPS[op] == "identity" and stride2:
                    self.ops[(b, side)] = FactorizedReduction(reg, k, width, width)
        used = {i for blk in blocks for i in (blk[0], blk[2])}
        self.loose = [b + 2 for b in range(len(blocks)) if b + 2 not in used]

    @property
    def out_channels(self) -> int:
        return len(self.loose) * self.width

    def __call__(self, prev2: Tensor, prev: Tensor) -> Tensor:
        record_node()
        record_node()
        states = [self.cal2(prev2, False), self.cal1(prev, False)]
        for b, (xi, xo, yi, yo) in enumerate(self.blocks):
            outs = []
            for side, (idx, op) in enumerate(((xi, xo), (yi, yo))):
                stride = 2 if self.reduction and idx < 2 else 1
                record_node()
                name = ENAS_OPS[op]
                module = self.ops.get((b, side))
                x = states[idx]
                if name in ("sep3", "sep5"):
                    outs.append(module(x, False, stride))
                elif name == "avg3":
                    outs.append(avg_pool3(x, stride))
                elif name == "max3":
                    outs.append(max_pool3(x, stride))
                elif stride == 2:
                    outs.append(module(x, False))
                else:
                    outs.append(x)
            states.append(sum_op(outs))
        return channel_concat([states[i] for i in self.loose])


class EnasStub:
    """Two-predecessor, pairwise-sum cell network at the same B, N and f."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.registry = reg = Registry(np.random.default_rng(seed))
        normal, reduction = enas_cells(config.B, seed)
        self.normal_blocks, self.reduction_blocks = normal, reduction
        f = config.filters
        self.stem = ConvBN(reg, "stem", 3, f, 3, pre_relu=False)
        self.cells = []
        c_prev2 = c_prev = f
        width = f
        prev_was_reduction = False
        index = 0
        for stage in range(STAGES):
            kinds = ["normal"] * config.N + (["reduction"] if stage < STAGES - 1 else [])
            for kind in kinds:
                if kind == "reduction":
                    width *= 2
                cell = _EnasCell(reg, f"cell{index}", reduction if kind == "reduction" else normal,
                                 c_prev2, c_prev, width, kind == "reduction", prev_was_reduction)
                self.cells.append(cell)
                c_prev2, c_prev = c_prev, cell.out_channels
                prev_was_reduction = kind == "reduction"
                index += 1
        self.head_w = reg.weight("head/w", (config.num_classes, c_prev), fan_in=c_prev)
        self.head_b = reg.zeros("head/b", (config.num_classes,))

    @property
    def cell_count(self) -> int:
        return len(self.cells)

    def max_parallel(self, _genotype=None) -> int:
        depth = {0: 0, 1: 0}
        for b, (xi, _, yi, _) in enumerate(self.normal_blocks):
            depth[b + 2] = max(depth[xi], depth[yi]) + 1
        levels = [d for k, d in depth.items() if k >= 2]
        # two ops per block run side by side
        return 2 * max(levels.count(d) for d in set(levels))

    def forward(self, x, genotype=None, training: bool = False, rng=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.registry.dtype)
        h = self.stem(x, False)
        prev2 = prev = h
        for cell in self.cells:
            prev2, prev = prev, cell(prev2, prev)
        return linear(global_avg_pool(relu_op(prev)), self.head_w, self.head_b)

    __call__ = forward


# ---------------------------------------------------------------------------
# latency


@dataclass
class Timing:
    batch: int
    median_ms: float
    mean_ms: float
    p95_ms: float
    iterations: int


def latency_benchmark(model, batch_sizes: Sequence[int], iterations: int = 1000, warmup: int = 50,
                      genotype: Genotype | None = None, threads: int | None = 1, seed: int = 0) -> list[Timing]:
    """Time ``iterations`` consecutive evaluation-mode forward passes per batch size.

    The first ``warmup`` passes are run and discarded.  ``threads=None``
    leaves the BLAS thread pool alone.
    """
    if iterations <= 0:
        raise ValueError(f"iterations must be positive, got {iterations}")
    size = model.config.image_size
    rng = np.random.default_rng(seed)
    out = []
    limits = threadpool_limits(threads) if threads else None
    try:
        for batch in batch_sizes:
            x = rng.standard_normal((batch, 3, size, size)).astype(model.registry.dtype)
            times = []
            with no_grad():
                for _ in range(warmup):
                    model.forward(x, genotype, training=False)
                for _ in range(iterations):
                    t0 = time.perf_counter()
                    model.forward(x, genotype, training=False)
                    times.append((time.perf_counter() - t0) * 1000)
            times.sort()
            p95 = times[min(len(times) - 1, int(np.ceil(0.95 * len(times))) - 1)]
            out.append(Timing(batch, statistics.median(times), statistics.fmean(times), p95, iterations))
    finally:
        if limits is not None:
            limits.unregister()
    return out


def report_rows(name: str, model, timings: Sequence[Timing] | None, genotype: Genotype | None = None,
                batches: Sequence[int] | None = None) -> list[dict]:
    """Rows in the CSV report schema, one per batch size."""
    cfg = model.config
    size = cfg.image_size
    rows = []
    if timings is None:
        timings = [Timing(b, float("nan"), float("nan"), float("nan"), 0) for b in (batches or [1])]
    for t in timings:
        cost = estimate_costs(model, (t.batch, 3, size, size), genotype)
        rows.append({
            "model": name, "batch": t.batch, "f": cfg.filters, "N": cfg.N, "B": cfg.B,
            "params": cost.params, "flops": cost.flops, "mac": cost.mac, "nodes": cost.nodes,
            "elementwise": cost.elementwise,
            "median_ms": f"{t.median_ms:.4f}", "mean_ms": f"{t.mean_ms:.4f}", "p95_ms": f"{t.p95_ms:.4f}",
        })
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(CSV_FIELDS), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# DOT export


def _cell_dot(cell: CellGenotype, prefix: str, indent: str) -> list[str]:
    loose = set(gt.loose_ends(cell))
    lines = [f'{indent}{prefix}in [label="input", shape=box];']
    for pos, b in enumerate(cell.blocks, start=1):
        style = ', peripheries=2' if pos in loose else ""
        lines.append(f'{indent}{prefix}b{pos} [label="{pos}: {b.op.name}"{style}];')
    lines.append(f'{indent}{prefix}out [label="sum", shape=box];')
    for pos, b in enumerate(cell.blocks, start=1):
        src = f"{prefix}in" if b.input_index == 0 else f"{prefix}b{b.input_index}"
        lines.append(f"{indent}{src} -> {prefix}b{pos};")
    for pos in sorted(loose):
        lines.append(f'{indent}{prefix}b{pos} -> {prefix}out [style=bold];')
    return lines


def emit_graph(obj) -> str:
    """DOT text for a cell, a genotype pair, or a standalone model's cells and layer chain."""
    if isinstance(obj, CellGenotype):
        return "\n".join([f"digraph {obj.cell_type} {{", "  rankdir=TB;", *_cell_dot(obj, "", "  "), "}"]) + "\n"
    layers = None
    if isinstance(obj, Network):
        if obj.genotype is None:
            raise ValueError("emit_graph needs a genotype; supernets have none")
        layers = obj.plan
        obj = obj.genotype
    if not isinstance(obj, Genotype):
        raise TypeError(f"cannot draw {type(obj).__name__}")
    lines = ["digraph genotype {", "  rankdir=TB;"]
    for cell in obj.cells():
        p = cell.cell_type[0]
        lines.append(f"  subgraph cluster_{cell.cell_type} {{")
        lines.append(f'    label="{cell.cell_type}";')
        lines.extend(_cell_dot(cell, f"{p}_", "    "))
        lines.append("  }")
    if layers is not None:
        lines.append('  stem [label="stem", shape=box];')
        prev = "stem"
        for spec in layers:
            node = f"layer{spec.index}"
            lines.append(f'  {node} [label="{node} {spec.kind} {spec.channels_in}->{spec.channels_out}", shape=box];')
            lines.append(f"  {prev} -> {node};")
            prev = node
        lines.append('  head [label="head", shape=box];')
        lines.append(f"  {prev} -> head;")
    lines.append("}")
    return "\n".join(lines) + "\n"
