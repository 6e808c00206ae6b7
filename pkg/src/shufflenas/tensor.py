"""Dense tensors with a reverse-mode tape.

Every differentiable function in this module (and in :mod:`shufflenas.ops`)
returns a new :class:`Tensor` that remembers its parents and a closure that
maps the output gradient onto the parents.  :func:`backward` walks the
recorded graph in reverse topological order.

Graph recording is switched off inside :func:`no_grad`, which is how all
evaluation passes run.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()

_DEFAULT_DTYPE = np.float32


def get_default_dtype():
    return getattr(_state, "dtype", _DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = previous


class Tensor:
    """An n-d array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if arr.ndim > 0 and 0 in arr.shape:
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # operator sugar; the functional forms below are the real definitions
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable registry key."""

    __slots__ = ("unique_id", "update_count")

    def __init__(self, data, unique_id: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.unique_id = unique_id
        self.update_count = 0

    def assign(self, value: np.ndarray) -> None:
        """In-place update used by optimizers; the shape is frozen."""
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(
                f"parameter {self.unique_id}: shape {self.data.shape} cannot change to {value.shape}"
            )
        self.data = value
        self.update_count += 1

    def __repr__(self) -> str:
        return f"Parameter({self.unique_id!r}, shape={self.shape})"


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=like.dtype), like.shape).copy())


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.parents = ()
    out.backward_fn = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Topologically ordered record of the operations that produced ``root``."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a map from leaf tensor to its gradient.  Leaves the loss does not
    depend on are absent from the map and keep their previous ``.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = tape or Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ---------------------------------------------------------------------------
# elementwise


def _check_same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)
    return _make(a.data * f, (a,), lambda g: (g * f,), "scale")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "exp": exp}


def elementwise(op_kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by name; ``scale`` takes a float as ``b``."""
    if op_kind == "scale":
        return scale(a, float(b))
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(a)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors, left to right."""
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., j] + bias[j]."""
    if bias.shape != (x.shape[-1],):
        raise ValueError(f"bias shape {bias.shape} does not match last axis of {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)), "add_bias")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return scale(sum_all(a), 1.0 / n)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), bw, "sum_axis")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    shape = a.shape
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index].copy(), (a,), bw, "slice")


def index_select(a: Tensor, axis: int, indices: Sequence[int]) -> Tensor:
    """Gather ``indices`` along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(a.data, idx, axis=axis), (a,), bw, "index_select")


def pick(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Row-wise gather: out[i] = a[i, indices[i]] for a 2-d tensor."""
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, idx] = g
        return (full,)

    return _make(a.data[rows, idx], (a,), bw, "pick")


# ---------------------------------------------------------------------------
# linear algebra and losses


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-d tensor."""
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _make(out, (logits,), bw, "log_softmax")


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be batch x classes, got {logits.shape}")
    batch, classes = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - log_z
    rows = np.arange(batch)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / batch),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")


def embedding(table: Tensor, indices: Sequence[int]) -> Tensor:
    return index_select(table, 0, indices)


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"SNASCKPT"
_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write ``{key: array}`` as a flat little-endian container.

    Layout: magic, u32 version, u32 entry count, then per entry: u16 key
    length, utf-8 key, u8 dtype code, u8 ndim, u32 extents, raw payload.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for key, arr in arrays.items():
            arr = np.asarray(arr)
            dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
            if dt not in _DTYPE_CODES:
                raise TypeError(f"{key}: unsupported dtype {arr.dtype}")
            name = key.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        key = blob[pos : pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[key] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after {count} entries")
    return out


def parameters_to_arrays(params: Iterable[Parameter]) -> dict[str, np.ndarray]:
    out = {}
    for p in params:
        if p.unique_id in out:
            raise ValueError(f"duplicate parameter id {p.unique_id}")
        out[p.unique_id] = p.data
    return out
