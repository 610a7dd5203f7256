"""Dense tensors with a reverse-mode tape and a finite-difference checker.

A :class:`Tensor` wraps a numpy array. Operations on tensors that descend
from a leaf watched by a :class:`Tape` are recorded on that tape in
execution order, so the record is topologically sorted by construction and
a single reverse sweep yields gradients for every leaf.

Tensors that are not attached to any tape behave as plain values: the same
model code runs with or without gradient tracking.

Broadcasting is deliberately absent. Shape-changing helpers such as
:func:`expand` and :func:`add_bias` make every replication explicit, which
keeps the backward rules short.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DeterminismError, DimensionError, DomainError, NumericError, TapeError

__all__ = [
    "Tensor", "Tape", "ParamStore", "GradCheckReport", "resolve_dtype", "constant", "zeros",
    "matmul", "add", "sub", "mul", "scale", "add_bias", "expand", "tanh", "sigmoid", "exp",
    "log", "concat", "cols", "step_slice", "take", "where", "softmax", "log_softmax", "pick",
    "total", "reshape", "transpose", "batched_matvec", "batched_vecmat", "elementwise",
    "backward", "grad_check",
]


def resolve_dtype(precision) -> np.dtype:
    """Map ``"float32"``, ``32``, ``"64"``, numpy dtypes etc. to a float dtype."""
    if isinstance(precision, str):
        key = precision.lower().replace("-bit", "").replace("bit", "").strip()
        table = {"32": np.float32, "float32": np.float32, "f32": np.float32, "single": np.float32,
                 "64": np.float64, "float64": np.float64, "f64": np.float64, "double": np.float64}
        if key not in table:
            raise ConfigError(f"unknown precision {precision!r}")
        return np.dtype(table[key])
    if precision in (32, 64):
        return np.dtype(np.float32 if precision == 32 else np.float64)
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ConfigError(f"unsupported precision {precision!r}")
    return dt


class Tensor:
    __slots__ = ("data", "tape", "parents", "backward_fn", "index", "op")

    def __init__(self, data, tape: "Tape | None" = None, parents=(), backward_fn=None, op=None):
        self.data = data
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = -1
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", tracked" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def constant(x, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


class Tape:
    """Ordered record of the operations reachable from watched leaves.

    A tape belongs to one worker; do not share it while recording.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def _record(self, t: Tensor) -> None:
        t.index = len(self.nodes)
        self.nodes.append(t)

    def watch(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.leaves:
            raise TapeError(f"leaf {name!r} already watched")
        leaf = Tensor(array, tape=self, op="leaf")
        self._record(leaf)
        self.leaves[name] = leaf
        return leaf

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        names = sorted(params)
        return {name: self.watch(name, params[name]) for name in names}

    def backward(self, scalar: Tensor) -> dict[str, np.ndarray]:
        return backward(scalar, self)

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_of(parents: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise TapeError("operands are recorded on different tapes")
    return tape


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    tape = _tape_of(parents)
    if tape is None:
        return Tensor(data, op=op)
    out = Tensor(data, tape, parents, backward_fn, op)
    tape._record(out)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``b`` a matrix and ``a`` a vector, matrix or stack of matrices."""
    if b.ndim != 2 or a.ndim not in (1, 2, 3) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    k, n = bd.shape

    def bw(g):
        ga = g @ bd.T
        if ad.ndim == 1:
            gb = np.outer(ad, g)
        else:
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def batched_matvec(m: Tensor, v: Tensor) -> Tensor:
    """(B, n, d) x (B, d) -> (B, n)."""
    if m.ndim != 3 or v.ndim != 2 or m.shape[0] != v.shape[0] or m.shape[2] != v.shape[1]:
        raise DimensionError(f"batched_matvec: {m.shape} vs {v.shape}")
    md, vd = m.data, v.data

    def bw(g):
        gm = g[:, :, None] * vd[:, None, :]
        gv = np.matmul(g[:, None, :], md)[:, 0, :]
        return gm, gv

    return _result(np.matmul(md, vd[:, :, None])[:, :, 0], (m, v), bw, "batched_matvec")


def batched_vecmat(w: Tensor, m: Tensor) -> Tensor:
    """(B, n) x (B, n, d) -> (B, d): per-row weighted sum of memory rows."""
    if m.ndim != 3 or w.ndim != 2 or w.shape != m.shape[:2]:
        raise DimensionError(f"batched_vecmat: {w.shape} vs {m.shape}")
    wd, md = w.data, m.data

    def bw(g):
        gw = np.matmul(md, g[:, :, None])[:, :, 0]
        gm = wd[:, :, None] * g[:, None, :]
        return gw, gm

    return _result(np.matmul(wd[:, None, :], md)[:, 0, :], (w, m), bw, "batched_vecmat")


# ---------------------------------------------------------------- pointwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of ``x`` along the last axis."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    n = b.shape[0]
    return _result(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add_bias")


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _result(out, (x,), lambda g: (g.sum(axis=axis),), "expand")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    half = x.data.dtype.type(0.5)
    y = half * (1.0 + np.tanh(half * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):    # overflow surfaces as a NumericError below
        y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise DomainError("log of non-positive value")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat of nothing")
    lead = tensors[0].shape[:-1] if axis == -1 else None
    if axis == -1 and any(t.shape[:-1] != lead for t in tensors):
        raise DimensionError(f"concat: leading shapes differ {[t.shape for t in tensors]}")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` of the last axis."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise DimensionError(f"cols: bad range [{start}, {stop}) for {x.shape}")
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype)
        gx[..., start:stop] = g
        return (gx,)

    return _result(x.data[..., start:stop], (x,), bw, "cols")


def step_slice(x: Tensor, t: int) -> Tensor:
    """``x[:, t]`` for a tensor with at least two axes."""
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype)
        gx[:, t] = g
        return (gx,)

    return _result(x.data[:, t], (x,), bw, "step_slice")


def take(table: Tensor, idx) -> Tensor:
    """Gather rows of a matrix: result shape is ``idx.shape + (d,)``."""
    idx = np.asarray(idx, dtype=np.intp)
    if table.ndim != 2:
        raise DimensionError(f"take expects a matrix table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DomainError(f"take: index out of range for table with {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        gt = np.zeros(shape, dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _result(table.data[idx], (table,), bw, "take")


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` is set, else ``b``."""
    _same_shape("where", a, b)
    mask = np.asarray(mask, dtype=bool)
    zero = a.dtype.type(0)
    return _result(np.where(mask, a.data, b.data), (a, b),
                   lambda g: (np.where(mask, g, zero), np.where(mask, zero, g)), "where")


def elementwise(kind: str, *operands: Tensor) -> Tensor:
    """Dispatch by name: add, mul, tanh, sigmoid or concat."""
    table = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid}
    if kind == "concat":
        return concat(operands)
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](*operands)


# ---------------------------------------------------------------- reductions

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    if x.size == 0 or x.shape[-1] == 0:
        raise DomainError("softmax of an empty vector")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    if x.size == 0 or x.shape[-1] == 0:
        raise DomainError("log_softmax of an empty vector")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), bw, "log_softmax")


def pick(x: Tensor, idx) -> Tensor:
    """``x[b, idx[b]]`` for a (B, n) tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"pick: {x.shape} with index shape {idx.shape}")
    rows = np.arange(x.shape[0])
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype)
        gx[rows, idx] = g
        return (gx,)

    return _result(x.data[rows, idx], (x,), bw, "pick")


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 1-element tensor."""
    shape = x.shape
    out = np.array([x.data.sum()], dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.full(shape, g[0], dtype=g.dtype),), "total")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- gradients

def backward(scalar: Tensor, tape: Tape) -> dict[str, np.ndarray]:
    """Gradients of a 1-element tensor with respect to every leaf of ``tape``.

    Leaves that do not influence ``scalar`` receive exact zeros.
    """
    if scalar.tape is not tape or scalar.index < 0 or tape.nodes[scalar.index] is not scalar:
        raise TapeError("scalar was not produced by this tape")
    if scalar.size != 1:
        raise DimensionError(f"backward needs a 1-element tensor, got shape {scalar.shape}")
    nodes = tape.nodes
    grads: list = [None] * (scalar.index + 1)
    grads[scalar.index] = np.ones(scalar.shape, dtype=scalar.dtype)
    for i in range(scalar.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.backward_fn is None:
            continue
        grads[i] = None if node.op != "leaf" else g
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if p.tape is not tape or pg is None:
                continue
            j = p.index
            grads[j] = pg if grads[j] is None else grads[j] + pg
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads[leaf.index] if leaf.index < len(grads) else None
        if g is None:
            out[name] = np.zeros(leaf.shape, dtype=leaf.dtype)
        else:
            out[name] = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    return out


class ParamStore:
    """Named parameter arrays with deterministic (sorted) iteration."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, seed: int = 0,
                 dtype=np.float32):
        self.seed = int(seed)
        self.dtype = resolve_dtype(dtype)
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in (arrays or {}).items():
            self[name] = arr

    def __setitem__(self, name: str, value) -> None:
        self._arrays[name] = np.ascontiguousarray(value, dtype=self.dtype)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._arrays))

    def keys(self) -> list[str]:
        return sorted(self._arrays)

    def items(self) -> list[tuple[str, np.ndarray]]:
        return [(k, self._arrays[k]) for k in sorted(self._arrays)]

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.items()}

    def num_values(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def rng(self, *salt: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *salt])

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()}, self.seed, self.dtype)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(dict(self._arrays), self.seed, dtype)

    def as_constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.items()}

    def equal(self, other: "ParamStore") -> bool:
        return self.keys() == other.keys() and all(
            np.array_equal(self[k], other[k]) for k in self.keys())


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    checked_entries: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _loss_value(loss_fn, params: ParamStore) -> float:
    out = loss_fn(params.as_constants())
    if out.size != 1:
        raise DimensionError(f"loss must be a 1-element tensor, got {out.shape}")
    return out.item()


def grad_check(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: ParamStore,
               step: float = 1e-5, tolerance: float = 1e-6,
               max_entries: int | None = None, names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare tape gradients with central differences, per parameter.

    ``loss_fn`` maps a dict of parameter tensors to a 1-element tensor. The
    relative error of an entry is ``|ad - fd| / max(|ad|, |fd|, 1e-8)``.
    With ``max_entries`` only a seeded subset of each parameter is probed.
    """
    if params.dtype != np.float64:
        raise ValueError("grad_check requires 64-bit parameters")
    first = _loss_value(loss_fn, params)
    if _loss_value(loss_fn, params) != first:
        raise DeterminismError("loss_fn returned different values for identical inputs")
    tape = Tape()
    leaves = tape.watch_all({k: v for k, v in params.items()})
    analytic = backward(loss_fn(leaves), tape)

    selected = sorted(names) if names is not None else params.keys()
    rng = params.rng(7919)
    errors, counts = {}, {}
    for name in selected:
        arr = params[name]
        flat = arr.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            positions = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        ad = analytic[name].reshape(-1)
        worst = 0.0
        for pos in positions:
            orig = flat[pos]
            flat[pos] = orig + step
            up = _loss_value(loss_fn, params)
            flat[pos] = orig - step
            down = _loss_value(loss_fn, params)
            flat[pos] = orig
            fd = (up - down) / (2.0 * step)
            err = abs(ad[pos] - fd) / max(abs(ad[pos]), abs(fd), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
        counts[name] = len(positions)
    return GradCheckReport(errors, tolerance, counts)
