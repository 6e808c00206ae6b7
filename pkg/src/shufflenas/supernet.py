"""Macro architecture: stem, three stages of split/cell/concat/shuffle layers, head.

A :class:`Network` built without a genotype is the weight-sharing supernet:
every (layer, block, op) triple gets its own weights and any genotype runs
as a sub-graph.  Built with a genotype it is a standalone model holding only
the weights that genotype selects.  Both run the same forward code.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import genotype as gt
from .genotype import CellGenotype, Genotype
from .ops import (
    FactorizedReduction,
    OperationId,
    Registry,
    ConvBN,
    SepConv,
    apply_candidate_op,
    batch_norm,
    channel_concat,
    conv2d,
    channel_shuffle,
    channel_split,
    drop_path,
    global_avg_pool,
    index_select,
    linear,
    make_candidate,
    record_node,
    relu_op,
    sum_op,
)
from .tensor import Parameter, Tensor

MERGE_MODES = ("sum", "concat_1x1")
BYPASS_MODES = ("factorized", "sep3x3", "reduction_cell")
STAGES = 3


@dataclass
class ModelConfig:
    B: int = 5
    N: int = 5
    filters: int = 36
    num_classes: int = 10
    merge_mode: str = "sum"
    cell_bn: bool = False
    bypass_mode: str = "factorized"
    drop_path_keep: float | None = None
    avg_pool_for_min: bool = False
    image_size: int = 32

    def __post_init__(self):
        if self.drop_path_keep is None:
            self.drop_path_keep = 0.5 if self.cell_bn else 0.9

    def validate(self) -> None:
        problems = []
        if not 1 <= self.B <= gt.MAX_BLOCKS:
            problems.append(f"B must lie in [1, {gt.MAX_BLOCKS}], got {self.B}")
        if self.N < 1:
            problems.append(f"N must be >= 1, got {self.N}")
        if self.filters < 4 or self.filters % 4:
            problems.append(f"filters must be a positive multiple of 4, got {self.filters}")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.merge_mode not in MERGE_MODES:
            problems.append(f"merge_mode must be one of {MERGE_MODES}, got {self.merge_mode!r}")
        if self.bypass_mode not in BYPASS_MODES:
            problems.append(f"bypass_mode must be one of {BYPASS_MODES}, got {self.bypass_mode!r}")
        if not 0 < self.drop_path_keep <= 1:
            problems.append(f"drop_path_keep must lie in (0, 1], got {self.drop_path_keep}")
        if self.image_size < 4:
            problems.append(f"image_size must be >= 4, got {self.image_size}")
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    @property
    def total_cells(self) -> int:
        return STAGES * self.N + 2

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str  # "normal" | "reduction"
    channels_in: int
    spatial_in: int

    @property
    def cell_width(self) -> int:
        return self.channels_in // 2 if self.kind == "normal" else self.channels_in

    @property
    def channels_out(self) -> int:
        return self.channels_in * (2 if self.kind == "reduction" else 1)

    @property
    def spatial_out(self) -> int:
        return -(-self.spatial_in // 2) if self.kind == "reduction" else self.spatial_in


def layer_plan(config: ModelConfig) -> list[LayerSpec]:
    plan = []
    c, s = config.filters, config.image_size
    for stage in range(STAGES):
        for _ in range(config.N):
            plan.append(LayerSpec(len(plan), "normal", c, s))
        if stage < STAGES - 1:
            spec = LayerSpec(len(plan), "reduction", c, s)
            plan.append(spec)
            c, s = spec.channels_out, spec.spatial_out
    return plan


class _Cell:
    """Weights of one cell slot: candidate ops per block plus merge weights."""

    def __init__(self, reg: Registry, key: str, width: int, reduction: bool, config: ModelConfig,
                 cell: CellGenotype | None):
        self.key = key
        self.width = width
        self.reduction = reduction
        self.ops: dict[tuple[int, OperationId], object] = {}
        if cell is None:
            choices = [(pos, op, True) for pos in range(1, config.B + 1) for op in OperationId]
            merge_inputs = config.B
        else:
            choices = [(pos, b.op, b.input_index == 0) for pos, b in enumerate(cell.blocks, start=1)]
            merge_inputs = len(gt.loose_ends(cell))
        for pos, op, may_reduce in choices:
            module = make_candidate(reg, f"{key}/block{pos}/{op.name}", op, width, reducing=reduction and may_reduce)
            if module is not None:
                self.ops[(pos, op)] = module
        self.shared_merge = cell is None
        self.merge = None
        self.bn = None
        if config.merge_mode == "concat_1x1":
            self.merge = ConvBN(reg, f"{key}/merge", merge_inputs * width, width, 1)
        elif config.cell_bn:
            self.bn = reg.batch_norm(f"{key}/cell_bn", width)

    def __call__(self, cell: CellGenotype, x: Tensor, config: ModelConfig, training: bool,
                 rng: np.random.Generator | None) -> Tensor:
        states = [x]
        # source[i]: the block whose tensor state i aliases through stride-1 identities
        source = [0]
        for pos, block in enumerate(cell.blocks, start=1):
            stride = 2 if self.reduction and block.input_index == 0 else 1
            module = self.ops.get((pos, block.op))
            states.append(apply_candidate_op(block.op, states[block.input_index], stride, module,
                                             training, config.avg_pool_for_min))
            aliased = block.op is OperationId.IDENTITY and stride == 1
            source.append(source[block.input_index] if aliased else pos)
        loose = gt.loose_ends(cell)
        if self.merge is None:
            # summing in source order makes identity padding bit-exact, not just close
            loose = sorted(loose, key=lambda i: source[i])
        outs = [states[i] for i in loose]
        if training:
            outs = drop_path(outs, config.drop_path_keep, training, rng)
        if self.merge is None:
            y = sum_op(outs)
            if self.bn is not None:
                y = batch_norm(y, self.bn, training)
            return y
        cat = channel_concat(outs) if len(outs) > 1 else outs[0]
        if not self.shared_merge:
            return self.merge(cat, training)
        # supernet merge conv spans all B blocks; pick the input columns of the loose ends
        cols = [(i - 1) * self.width + c for i in loose for c in range(self.width)]
        w = index_select(self.merge.w, 1, cols)
        return batch_norm(conv2d(relu_op(cat), w), self.merge.bn, training)


class Network:
    """ShuffleNASNet macro model; a supernet when ``genotype`` is None."""

    def __init__(self, config: ModelConfig, genotype: Genotype | None = None, seed: int = 0,
                 rng: np.random.Generator | None = None):
        config.validate()
        if genotype is not None:
            for cell in genotype.cells():
                errors = gt.validate(cell)
                if errors:
                    raise ValueError(f"invalid {cell.cell_type} cell: " + "; ".join(errors))
            if genotype.B != config.B:
                raise ValueError(f"genotype has B={genotype.B}, config has B={config.B}")
        self.config = config
        self.genotype = genotype
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.drop_rng = np.random.default_rng(self.rng.integers(2**63))
        self.registry = reg = Registry(self.rng)
        self.plan = layer_plan(config)
        f = config.filters
        self.stem = ConvBN(reg, "stem", 3, f, 3, pre_relu=False)
        self.cells: list[_Cell] = []
        self.bypass: list[object] = []
        for spec in self.plan:
            key = f"layer{spec.index}"
            is_red = spec.kind == "reduction"
            cell = None if genotype is None else (genotype.reduction if is_red else genotype.normal)
            self.cells.append(_Cell(reg, key, spec.cell_width, is_red, config, cell))
            if not is_red:
                self.bypass.append(None)
            elif config.bypass_mode == "factorized":
                self.bypass.append(FactorizedReduction(reg, f"{key}/bypass", spec.channels_in, spec.channels_in))
            elif config.bypass_mode == "sep3x3":
                self.bypass.append(SepConv(reg, f"{key}/bypass", spec.channels_in, 3))
            else:
                self.bypass.append(_Cell(reg, f"{key}/bypass", spec.cell_width, True, config, cell))
        width = self.plan[-1].channels_out
        self.head_w = reg.weight("head/w", (config.num_classes, width), fan_in=width)
        self.head_b = reg.zeros("head/b", (config.num_classes,))

    @property
    def is_supernet(self) -> bool:
        return self.genotype is None

    @property
    def cell_count(self) -> int:
        return len(self.plan)

    def max_parallel(self, genotype: Genotype | None = None) -> int:
        """Widest level of blocks across both cells of ``genotype``."""
        g = genotype or self.genotype
        if g is None:
            raise ValueError("fragmentation needs a genotype")
        return max(max(d.count(v) for v in set(d)) for d in (gt.block_depths(c) for c in g.cells()))

    def parameters(self) -> list[Parameter]:
        return list(self.registry.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        return iter(self.registry.params.items())

    def forward(self, x, genotype: Genotype | None = None, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        g = genotype if genotype is not None else self.genotype
        if g is None:
            raise ValueError("a supernet forward needs a genotype")
        if g.B != self.config.B:
            raise ValueError(f"genotype has B={g.B}, network was built for B={self.config.B}")
        if self.genotype is not None and g != self.genotype:
            raise ValueError("a standalone model only runs the genotype it was built for")
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.registry.dtype)
        size = self.config.image_size
        if x.data.ndim != 4 or x.shape[1:] != (3, size, size):
            raise ValueError(f"expected input batch x 3 x {size} x {size}, got {x.shape}")
        rng = rng if rng is not None else self.drop_rng
        h = self.stem(x, training)
        for spec, cell, bypass in zip(self.plan, self.cells, self.bypass):
            if spec.kind == "normal":
                left, right = channel_split(h)
                h = channel_shuffle(channel_concat([cell(g.normal, left, self.config, training, rng), right]))
            else:
                reduced = cell(g.reduction, h, self.config, training, rng)
                if isinstance(bypass, _Cell):
                    side = bypass(g.reduction, h, self.config, training, rng)
                else:
                    record_node()
                    side = bypass(h, training, 2)
                h = channel_shuffle(channel_concat([reduced, side]))
        pooled = global_avg_pool(relu_op(h))
        return linear(pooled, self.head_w, self.head_b)

    __call__ = forward

    # -- state ---------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.registry.params.items()}
        out.update(self.registry.buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching entries in; returns the keys of this model left untouched."""
        untouched = []
        buffers = self.registry.buffers()
        for key, p in self.registry.params.items():
            if key in state and state[key].shape == p.shape:
                p.data = np.array(state[key], dtype=p.dtype)
            else:
                untouched.append(key)
        for key, buf in buffers.items():
            if key in state and state[key].shape == buf.shape:
                buf[...] = state[key]
            else:
                untouched.append(key)
        if strict and untouched:
            raise KeyError(f"missing or mismatched entries: {untouched[:5]}{'...' if len(untouched) > 5 else ''}")
        return untouched

    def describe(self) -> str:
        """Deterministic text dump of the layer plan and parameter counts."""
        lines = [
            f"# B={self.config.B} N={self.config.N} filters={self.config.filters} "
            f"merge={self.config.merge_mode} cell_bn={self.config.cell_bn} bypass={self.config.bypass_mode} "
            f"{'supernet' if self.is_supernet else 'standalone'}"
        ]
        counts = {"stem": 0, "head": 0}
        for key, p in self.registry.params.items():
            prefix = key.split("/", 1)[0]
            counts[prefix] = counts.get(prefix, 0) + p.size
        c, s = self.config.filters, self.config.image_size
        lines.append(f"stem      3 -> {c:4d} ch  {s}x{s}  params={counts['stem']}")
        for spec in self.plan:
            lines.append(
                f"layer{spec.index:<3d} {spec.kind:9s} {spec.channels_in:4d} -> {spec.channels_out:4d} ch  "
                f"{spec.spatial_in}x{spec.spatial_in} -> {spec.spatial_out}x{spec.spatial_out}  "
                f"cell_width={spec.cell_width}  params={counts.get(f'layer{spec.index}', 0)}"
            )
        lines.append(f"head      {self.plan[-1].channels_out} -> {self.config.num_classes}  params={counts['head']}")
        lines.append(f"total params={self.registry.count()}")
        return "\n".join(lines) + "\n"


def build_supernet(config: ModelConfig, seed: int = 0) -> Network:
    return Network(config, None, seed=seed)


def build_final_model(g: Genotype, config: ModelConfig, seed: int = 0) -> Network:
    return Network(config, g, seed=seed)


def used_parameter_keys(net: Network, g: Genotype) -> set[str]:
    """Registry keys a forward pass of ``g`` reads (merge weights and shared stem/head included)."""
    used = set()
    for key in net.registry.params:
        if not key.startswith("layer"):
            used.add(key)
    for spec in net.plan:
        cell = g.reduction if spec.kind == "reduction" else g.normal
        prefixes = [f"layer{spec.index}/"]
        if spec.kind == "reduction" and net.config.bypass_mode == "reduction_cell":
            prefixes.append(f"layer{spec.index}/bypass/")
        for key in net.registry.params:
            if not key.startswith(prefixes[0]):
                continue
            rest = key[len(prefixes[0]):]
            if rest.startswith("bypass/") and net.config.bypass_mode == "reduction_cell":
                rest = rest[len("bypass/"):]
            elif rest.startswith("bypass/"):
                used.add(key)
                continue
            if rest.startswith("merge/") or rest.startswith("cell_bn/"):
                used.add(key)
                continue
            block_part, op_name = rest.split("/")[:2]
            pos = int(block_part[len("block"):])
            block = cell.blocks[pos - 1] if pos <= cell.B else None
            if block is None or block.op.name != op_name:
                continue
            if block.op is OperationId.IDENTITY and (spec.kind != "reduction" or block.input_index != 0):
                continue
            used.add(key)
    return used
