"""Cell genotypes: B (input index, operation) blocks per cell.

Input index 0 is the cell input, ``j >= 1`` the output of block ``j``.  The
cell output sums the *loose ends*, the blocks no later block consumes.  That
convention makes identity padding exact: appending ``IDENTITY`` on a loose
end swaps one summand for an identical copy, so a cell with ``B`` blocks is
reproduced verbatim in every larger space.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .ops import NUM_OPS, OperationId

CELL_TYPES = ("normal", "reduction")
MAX_BLOCKS = 8


@dataclass(frozen=True)
class BlockSpec:
    input_index: int
    op: OperationId

    def __post_init__(self):
        object.__setattr__(self, "op", OperationId(self.op))


@dataclass(frozen=True)
class CellGenotype:
    cell_type: str
    blocks: tuple[BlockSpec, ...]

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockSpec) else BlockSpec(*b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def of(cls, cell_type: str, pairs: Iterable[tuple[int, OperationId | int]]) -> "CellGenotype":
        return cls(cell_type, tuple(BlockSpec(i, op) for i, op in pairs))

    @property
    def B(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)


@dataclass(frozen=True)
class Genotype:
    normal: CellGenotype
    reduction: CellGenotype

    def __post_init__(self):
        if self.normal.B != self.reduction.B:
            raise ValueError(f"normal cell has B={self.normal.B}, reduction cell B={self.reduction.B}")

    @property
    def B(self) -> int:
        return self.normal.B

    def cells(self) -> tuple[CellGenotype, CellGenotype]:
        return self.normal, self.reduction


def validate(g: CellGenotype) -> list[str]:
    """Return rule violations; an empty list means ``g`` is well formed."""
    errors = []
    if g.cell_type not in CELL_TYPES:
        errors.append(f"unknown cell type {g.cell_type!r}")
    if not g.blocks:
        errors.append("genotype is empty: at least one block is required")
    for pos, block in enumerate(g.blocks, start=1):
        idx = block.input_index
        if pos == 1 and idx != 0:
            errors.append(f"block 1 must use input 0, got {idx}")
        elif idx < 0:
            errors.append(f"block {pos}: input index {idx} is negative")
        elif idx >= pos:
            errors.append(f"block {pos}: input {idx} is a forward reference (must be < {pos})")
    return errors


def is_valid(g: CellGenotype) -> bool:
    return not validate(g)


def _require_valid(g: CellGenotype) -> None:
    errors = validate(g)
    if errors:
        raise ValueError("; ".join(errors))


def loose_ends(g: CellGenotype) -> list[int]:
    """1-based positions of blocks whose output no later block reads, ascending."""
    consumed = {b.input_index for b in g.blocks}
    return [pos for pos in range(1, g.B + 1) if pos not in consumed]


def block_depths(g: CellGenotype) -> list[int]:
    depths = [0]
    for b in g.blocks:
        depths.append(depths[b.input_index] + 1)
    return depths[1:]


def embed(g: CellGenotype, b_target: int) -> CellGenotype:
    """Pad ``g`` with identities up to ``b_target`` blocks without changing its function.

    Each new block is an ``IDENTITY`` reading the lowest-numbered loose end.
    """
    if b_target < g.B:
        raise ValueError(f"cannot embed a B={g.B} cell into B={b_target}")
    _require_valid(g)
    blocks = list(g.blocks)
    while len(blocks) < b_target:
        current = CellGenotype(g.cell_type, tuple(blocks))
        blocks.append(BlockSpec(loose_ends(current)[0], OperationId.IDENTITY))
    return CellGenotype(g.cell_type, tuple(blocks))


def embed_genotype(g: Genotype, b_target: int) -> Genotype:
    return Genotype(embed(g.normal, b_target), embed(g.reduction, b_target))


def random_cell(rng: np.random.Generator, B: int, cell_type: str = "normal") -> CellGenotype:
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    blocks = []
    for pos in range(1, B + 1):
        idx = int(rng.integers(pos))
        op = OperationId(int(rng.integers(NUM_OPS)))
        blocks.append(BlockSpec(idx, op))
    return CellGenotype(cell_type, tuple(blocks))


def random_genotype(rng: np.random.Generator, B: int) -> Genotype:
    return Genotype(random_cell(rng, B, "normal"), random_cell(rng, B, "reduction"))


# ---------------------------------------------------------------------------
# text format:  "<cell_type>: <idx> <OP> | <idx> <OP> | ..."


def encode_cell(g: CellGenotype) -> str:
    body = " | ".join(f"{b.input_index} {b.op.name}" for b in g.blocks)
    return f"{g.cell_type}: {body}"


def encode(g: Genotype) -> str:
    return f"{encode_cell(g.normal)}\n{encode_cell(g.reduction)}\n"


class GenotypeDecodeError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


_BLOCK = re.compile(r"^\s*(-?\d+)\s+([A-Z0-9]+)\s*$")


def decode_cell(line: str, lineno: int = 1) -> CellGenotype:
    if ":" not in line:
        raise GenotypeDecodeError(lineno, "expected '<cell_type>: <idx> <OP> | ...'")
    head, body = line.split(":", 1)
    cell_type = head.strip()
    if cell_type not in CELL_TYPES:
        raise GenotypeDecodeError(lineno, f"unknown cell type {cell_type!r}")
    blocks = []
    for chunk in body.split("|"):
        m = _BLOCK.match(chunk)
        if not m:
            raise GenotypeDecodeError(lineno, f"malformed block {chunk.strip()!r}")
        try:
            op = OperationId[m.group(2)]
        except KeyError:
            raise GenotypeDecodeError(lineno, f"unknown operation {m.group(2)!r}") from None
        blocks.append(BlockSpec(int(m.group(1)), op))
    cell = CellGenotype(cell_type, tuple(blocks))
    errors = validate(cell)
    if errors:
        raise GenotypeDecodeError(lineno, "; ".join(errors))
    return cell


def decode(text: str) -> Genotype:
    cells: dict[str, CellGenotype] = {}
    lineno = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        cell = decode_cell(line, lineno)
        if cell.cell_type in cells:
            raise GenotypeDecodeError(lineno, f"duplicate {cell.cell_type} cell")
        cells[cell.cell_type] = cell
    missing = [t for t in CELL_TYPES if t not in cells]
    if missing:
        raise GenotypeDecodeError(lineno, f"missing {' and '.join(missing)} cell")
    try:
        return Genotype(cells["normal"], cells["reduction"])
    except ValueError as exc:
        raise GenotypeDecodeError(lineno, str(exc)) from None


def load(path) -> Genotype:
    with open(path, encoding="utf-8") as fh:
        return decode(fh.read())


def save(g: Genotype, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(encode(g))


SHIPPED = {"shufflenasnet-a": "shufflenasnet_a.txt", "shufflenasnet-b": "shufflenasnet_b.txt"}


def shipped(name: str) -> Genotype:
    """Bundled best-effort genotypes, ``shufflenasnet-a`` or ``shufflenasnet-b``."""
    from importlib import resources

    key = name.lower()
    if key not in SHIPPED:
        raise KeyError(f"no shipped genotype {name!r}; choose from {sorted(SHIPPED)}")
    return decode(resources.files(__package__).joinpath("genotypes", SHIPPED[key]).read_text(encoding="utf-8"))
