"""Minimal reverse-mode differentiation over dense numpy arrays.

Tensors hold row-major 32-bit data of rank at most 3. Every primitive
below computes its forward value eagerly and, when a :class:`Tape` is
active and one of its inputs requires a gradient, appends a record with
the backward rule. Matrices follow the column convention: a ``[d, n]``
array holds ``n`` token columns of size ``d``; rank-3 arrays carry a
leading batch axis.

>>> x = parameter([1.0, 2.0, 3.0])
>>> with Tape() as tape:
...     y = sum(mul(x, x))
>>> backward(tape, y)
>>> x.grad.tolist()
[2.0, 4.0, 6.0]
"""
from __future__ import annotations

import builtins
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
MAX_RANK = 3

_node_ids = itertools.count()
_local = threading.local()


class AutodiffError(Exception):
    """Base class for errors raised by the differentiation core."""


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class ContractError(AutodiffError, RuntimeError):
    pass


class InfiniteDivergenceError(AutodiffError, ValueError):
    pass


class DegenerateInputError(AutodiffError, ValueError):
    pass


def _state():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.dtype = DEFAULT_DTYPE
        _local.check_finite = True
    return _local


@contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` inside the block (used by gradient oracles)."""
    st = _state()
    old = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = old


@contextmanager
def finite_checks(enabled: bool):
    st = _state()
    old = st.check_finite
    st.check_finite = enabled
    try:
        yield
    finally:
        st.check_finite = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype or _state().dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def detach(x: Tensor) -> Tensor:
    """Leaf view of ``x`` that never receives gradient."""
    return Tensor(x.data, requires_grad=False, name=x.name, dtype=x.data.dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of primitive applications, recorded while the tape is active."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        tapes = _state().tapes
        if not tapes or tapes[-1] is not self:
            raise ContractError("tapes must be exited in LIFO order")
        tapes.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def current_tape() -> Tape | None:
    tapes = _state().tapes
    return tapes[-1] if tapes else None


def _finish(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    dtype = np.result_type(*(t.data.dtype for t in inputs)) if inputs else _state().dtype
    out_data = np.asarray(out_data, dtype=dtype)
    if _state().check_finite and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(out_data, dtype=dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.records.append(Record(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf on ``tape``."""
    if root.ndim != 0:
        raise ContractError(f"backward root must be a scalar, got shape {root.shape}")
    if root.is_leaf:
        raise ContractError("backward root was not produced on the tape")
    pending: dict[int, np.ndarray] = {root.node_id: np.ones((), dtype=root.data.dtype)}
    for rec in reversed(tape.records):
        g = pending.pop(rec.output.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
            if inp.is_leaf:
                if inp.grad is None:
                    inp.grad = gi.copy()
                else:
                    inp.grad += gi
            elif inp.node_id in pending:
                pending[inp.node_id] = pending[inp.node_id] + gi
            else:
                pending[inp.node_id] = gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("mul", a, b)
    return _finish("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("add_scalar", x.data + c, (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _finish("relu", np.where(on, x.data, 0), (x,), lambda g: (g * on,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + 1_{1xn} (x) b``: add a length-``d`` vector to every column of ``x``."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[-2] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to columns of {x.shape}")
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 2)

    def bw(g):
        return g, g.sum(axis=axes, dtype=np.float64)

    return _finish("add_bias", x.data + b.data[:, None], (x, b), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; a rank-3 operand is a batch of matrices, a rank-2 one is shared."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch extents differ in {a.shape} and {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _finish("matmul", a.data @ b.data, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")
    return _finish("transpose", np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if len(shape) > MAX_RANK or int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return _finish("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    d = x.shape[-2]
    if not 0 <= start < stop <= d:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {d} rows")

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return _finish("slice_rows", x.data[..., start:stop, :], (x,), bw)


def slice_vector(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 1 or not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_vector: [{start}:{stop}] invalid for {x.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _finish("slice_vector", x.data[start:stop], (x,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    lead = parts[0].shape[:-2]
    cols = parts[0].shape[-1]
    for p in parts:
        if p.ndim < 2 or p.shape[:-2] != lead or p.shape[-1] != cols:
            raise ShapeError(f"concat_rows: incompatible part shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.shape[-2] for p in parts])

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :] for i in range(len(parts)))

    return _finish("concat_rows", np.concatenate([p.data for p in parts], axis=-2), parts, bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` [V, d] as columns: ids [n] -> [d, n], ids [B, n] -> [B, d, n]."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim not in (1, 2):
        raise ShapeError(f"embedding_lookup: table {table.shape}, ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: id outside [0, {table.shape[0]})")
    out = np.swapaxes(table.data[ids], -1, -2)

    def bw(g):
        gt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), np.swapaxes(g, -1, -2).reshape(-1, table.shape[1]))
        return (gt,)

    return _finish("embedding_lookup", out, (table,), bw)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    total = x.data.sum(dtype=np.float64)
    return _finish("sum", total, (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _finish("mean", x.data.mean(dtype=np.float64), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape),))


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean of the entries of ``x`` selected by boolean ``mask`` (same shape)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_mean: mask {mask.shape} vs values {x.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("masked_mean: mask selects no entries")
    total = x.data.sum(where=mask, dtype=np.float64)
    return _finish("masked_mean", total / count, (x,), lambda g: (mask * (g / count),))


# ---------------------------------------------------------------- normalization

def softmax_columns(x: Tensor, mask=None) -> Tensor:
    """Softmax over axis -2 so every column sums to one.

    ``mask`` (boolean, broadcastable to ``x``) marks admissible rows; the
    others get probability exactly zero.
    """
    if x.ndim < 1:
        raise ShapeError("softmax_columns needs at least one axis")
    axis = -2 if x.ndim >= 2 else -1
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ContractError("softmax_columns: a column has no admissible entry")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True, dtype=np.float64)
    y = y.astype(x.data.dtype)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64)
        return (y * (g - inner),)

    return _finish("softmax_columns", y, (x,), bw)


def log_softmax_columns(x: Tensor) -> Tensor:
    axis = -2 if x.ndim >= 2 else -1
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64))
    y = (shifted - lse).astype(x.data.dtype)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True, dtype=np.float64),)

    return _finish("log_softmax_columns", y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each column over its ``d`` entries, then apply ``gain``/``bias``."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-2] if x.ndim >= 2 else 0
    if x.ndim < 2 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-2, keepdims=True, dtype=np.float64)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-2, keepdims=True, dtype=np.float64)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (centered * rstd).astype(x.data.dtype)
    out = gain.data[:, None] * xhat + bias.data[:, None]
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 2)

    def bw(g):
        dxhat = g * gain.data[:, None]
        m1 = dxhat.mean(axis=-2, keepdims=True, dtype=np.float64)
        m2 = (dxhat * xhat).mean(axis=-2, keepdims=True, dtype=np.float64)
        dx = rstd * (dxhat - m1 - xhat * m2)
        dgain = (g * xhat).sum(axis=axes, dtype=np.float64)
        dbias = g.sum(axis=axes, dtype=np.float64)
        return dx, dgain, dbias

    return _finish("layer_norm", out, (x, gain, bias), bw)


# ---------------------------------------------------------------- divergences

def _column_axis(x: Tensor) -> int:
    return -2 if x.ndim >= 2 else -1


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """D_KL(p || q) per column (a scalar for vectors), with 0 ln 0 := 0."""
    _check_same_shape("kl_div", p, q)
    axis = _column_axis(p)
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < 0) or np.any(np.abs(t.data.sum(axis=axis, dtype=np.float64) - 1) > 1e-5):
            raise ValueError(f"kl_div: {name} is not a probability distribution")
    support = p.data > 0
    if np.any(support & (q.data <= 0)):
        raise InfiniteDivergenceError("kl_div: q vanishes where p has mass")
    ratio = np.where(support, p.data / np.where(support, q.data, 1), 1)
    log_ratio = np.log(ratio)
    out = (p.data * log_ratio).sum(axis=axis, dtype=np.float64)

    def bw(g):
        g = np.expand_dims(g, axis)
        # d(p ln p)/dp diverges at p = 0; entries outside the support get no gradient
        gp = np.where(support, log_ratio + 1, 0) * g
        gq = -np.where(support, p.data / np.where(support, q.data, 1), 0) * g
        return gp, gq

    return _finish("kl_div", out, (p, q), bw)


def kl_div_log(logp: Tensor, logq: Tensor) -> Tensor:
    """Same divergence as :func:`kl_div` from log-probabilities, without underflow."""
    _check_same_shape("kl_div_log", logp, logq)
    axis = _column_axis(logp)
    p = np.exp(logp.data)
    diff = logp.data - logq.data
    out = (p * diff).sum(axis=axis, dtype=np.float64)

    def bw(g):
        g = np.expand_dims(g, axis)
        return p * (diff + 1) * g, -p * g

    return _finish("kl_div_log", out, (logp, logq), bw)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors, or of matching columns of two matrices."""
    _check_same_shape("cosine_sim", u, v)
    axis = _column_axis(u)
    nu = np.sqrt((u.data * u.data).sum(axis=axis, keepdims=True, dtype=np.float64))
    nv = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True, dtype=np.float64))
    if np.any(nu == 0) or np.any(nv == 0):
        raise DegenerateInputError("cosine_sim: zero vector")
    dot = (u.data * v.data).sum(axis=axis, keepdims=True, dtype=np.float64)
    cos = np.clip(dot / (nu * nv), -1.0, 1.0)

    def bw(g):
        g = np.expand_dims(g, axis)
        gu = g * (v.data / (nu * nv) - cos * u.data / (nu * nu))
        gv = g * (u.data / (nu * nv) - cos * v.data / (nv * nv))
        return gu, gv

    return _finish("cosine_sim", np.squeeze(cos, axis=axis), (u, v), bw)


def cross_entropy(target, logprobs: Tensor, mask=None) -> Tensor:
    """Mean negative log-probability of the target ids.

    For a vector of log-probabilities ``target`` is one index. For
    ``[V, n]`` or ``[B, V, n]`` inputs ``target`` holds one id per column and
    ``mask`` selects the columns that count.
    """
    target = np.asarray(target, dtype=np.int64)
    if logprobs.ndim == 1:
        if target.ndim != 0 or not 0 <= target < logprobs.shape[0]:
            raise ShapeError(f"cross_entropy: bad index {target} for {logprobs.shape}")
        idx = int(target)

        def bw1(g):
            full = np.zeros_like(logprobs.data)
            full[idx] = -g
            return (full,)

        return _finish("cross_entropy", -logprobs.data[idx], (logprobs,), bw1)

    cols_shape = logprobs.shape[:-2] + logprobs.shape[-1:]
    if target.shape != cols_shape:
        raise ShapeError(f"cross_entropy: targets {target.shape} vs columns {cols_shape}")
    mask = np.ones(cols_shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != cols_shape:
        raise ShapeError(f"cross_entropy: mask {mask.shape} vs columns {cols_shape}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("cross_entropy: mask selects no positions")
    safe = np.where(mask, target, 0)
    if safe.min() < 0 or safe.max() >= logprobs.shape[-2]:
        raise ShapeError("cross_entropy: target id out of range")
    picked = np.take_along_axis(logprobs.data, np.expand_dims(safe, -2), axis=-2)
    picked = np.squeeze(picked, -2)
    value = -(picked.sum(where=mask, dtype=np.float64)) / count

    def bw(g):
        full = np.zeros_like(logprobs.data)
        np.put_along_axis(full, np.expand_dims(safe, -2),
                          np.expand_dims(np.where(mask, -g / count, 0), -2), axis=-2)
        return (full,)

    return _finish("cross_entropy", value, (logprobs,), bw)


def stack_scalars(values: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Weighted sum of scalar tensors."""
    values = tuple(values)
    weights = [float(w) for w in weights]
    if len(values) != len(weights) or any(v.ndim != 0 for v in values):
        raise ShapeError("stack_scalars expects matching scalar tensors and weights")
    total = builtins.sum(w * float(v.data) for w, v in zip(weights, values))
    return _finish("weighted_sum", total, values, lambda g: tuple(g * w for w in weights))
