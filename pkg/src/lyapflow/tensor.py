"""Dense 2-D tensors with a small reverse-mode differentiation tape.

Every tensor is a read-only float64 matrix.  Operations take an optional
``tape``; when omitted, the tape is inferred from the inputs, so code that
builds a forward pass on a tape reads the same as code that evaluates
constants.  Gradients come from :func:`backward`.

    tape = Tape()
    w = tape.watch(Tensor([[1.0, 2.0]]))
    loss = squared_frobenius_norm(w)
    grads = backward(tape, loss)      # {w.uid: Tensor([[2., 4.]])}
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_uids = itertools.count()

# Reductions with more terms than this use compensated summation.
COMPENSATED_THRESHOLD = 10_000


class Tensor:
    """Immutable row-major matrix of float64 values."""

    __slots__ = ("_data", "uid", "tape")
    __array_priority__ = 1000

    def __init__(self, data, tape: "Tape | None" = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError("tensor", arr.shape)
        arr.setflags(write=False)
        self._data = arr
        self.uid = next(_uids)
        self.tape = tape

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape=None) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t._data = arr
        t.uid = next(_uids)
        t.tape = tape
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self._data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data)

    def __repr__(self):
        return f"Tensor({self._data.tolist()!r})" if self._data.size <= 16 else f"Tensor(shape={self.shape})"

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations.

    A tape belongs to one thread for its lifetime.  ``watch`` registers a
    trainable leaf; ``backward`` walks the record in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.parameters: dict[int, tuple[int, int]] = {}
        self._known: set[int] = set()

    def watch(self, value) -> Tensor:
        src = value.data if isinstance(value, Tensor) else value
        t = Tensor._wrap(np.array(src, dtype=np.float64), self)
        if t._data.ndim != 2:
            raise DimensionError("watch", t._data.shape)
        self.parameters[t.uid] = t.shape
        self._known.add(t.uid)
        return t

    def constant(self, value) -> Tensor:
        t = Tensor._wrap(np.array(_as_tensor(value).data), self)
        self._known.add(t.uid)
        return t

    def _record(self, op, inputs, out: Tensor, vjp):
        for t in inputs:
            if t.tape is self and t.uid not in self._known:
                raise ContractError(f"{op}: input {t.uid} was not produced on this tape")
        self.nodes.append(_Node(op, tuple(t.uid for t in inputs), out.uid, vjp))
        self._known.add(out.uid)

    def __len__(self):
        return len(self.nodes)


def _resolve_tape(op, inputs, tape):
    found = tape
    for t in inputs:
        if t.tape is not None:
            if found is None:
                found = t.tape
            elif t.tape is not found:
                raise ContractError(f"{op}: inputs belong to different tapes")
    return found


def _emit(op, inputs, arr, vjp, tape):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    tape = _resolve_tape(op, inputs, tape)
    out = Tensor._wrap(arr, tape)
    if tape is not None:
        tape._record(op, inputs, out, vjp)
    return out


def _broadcast(op, a: Tensor, b: Tensor):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(op, sa, sb)
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _sum_all(arr: np.ndarray) -> float:
    if arr.size > COMPENSATED_THRESHOLD:
        return math.fsum(arr.ravel().tolist())
    return float(arr.sum())


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor, tape=None) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError("matmul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g), tape)


def add(a: Tensor, b: Tensor, tape=None) -> Tensor:
    _broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), tape)


def subtract(a: Tensor, b: Tensor, tape=None) -> Tensor:
    _broadcast("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _emit("subtract", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), tape)


def hadamard(a: Tensor, b: Tensor, tape=None) -> Tensor:
    _broadcast("hadamard", a, b)
    A, B = a.data, b.data
    return _emit(
        "hadamard", (a, b), A * B,
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)), tape,
    )


def divide(a: Tensor, b: Tensor, tape=None) -> Tensor:
    _broadcast("divide", a, b)
    A, B = a.data, b.data
    if np.any(B == 0):
        raise NonFiniteError("divide: division by zero")
    out = A / B
    return _emit(
        "divide", (a, b), out,
        lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)), tape,
    )


def scale(a: Tensor, alpha: float, tape=None) -> Tensor:
    alpha = float(alpha)
    return _emit("scale", (a,), alpha * a.data, lambda g: (alpha * g,), tape)


def row_softmax(x: Tensor, mask: np.ndarray | None = None, tape=None) -> Tensor:
    """Softmax along each row, restricted to ``mask`` entries when given.

    Masked-out entries are exactly zero.  Every row must keep at least one
    entry.
    """
    X = x.data
    if mask is None:
        e = np.exp(X - X.max(axis=1, keepdims=True))
        Y = e / e.sum(axis=1, keepdims=True)

        def vjp(g):
            return (Y * (g - (g * Y).sum(axis=1, keepdims=True)),)

        return _emit("row_softmax", (x,), Y, vjp, tape)
    flat, starts = _support_index(mask, X.shape)
    # work on the supported entries only; they are in row-major order, so
    # each row is a contiguous segment beginning at ``starts``
    counts = np.diff(np.append(starts, flat.size))
    vals = X.ravel()[flat]
    vals = vals - np.repeat(np.maximum.reduceat(vals, starts), counts)
    e = np.exp(vals)
    y = e / np.repeat(np.add.reduceat(e, starts), counts)
    Y = np.zeros(X.shape)
    Y.ravel()[flat] = y

    def vjp_masked(g):
        gy = g.ravel()[flat] * y
        out = np.zeros(X.shape)
        out.ravel()[flat] = gy - y * np.repeat(np.add.reduceat(gy, starts), counts)
        return (out,)

    return _emit("row_softmax", (x,), Y, vjp_masked, tape)


_support_cache: list = [None, None, None]


def _support_index(mask, shape):
    """Flat indices of the True entries of ``mask`` and the start of each row."""
    if _support_cache[0] is mask:
        return _support_cache[1], _support_cache[2]
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise DimensionError("row_softmax", shape, m.shape)
    per_row = m.sum(axis=1)
    if np.any(per_row == 0):
        raise ContractError("row_softmax: a row has empty support")
    flat = np.flatnonzero(m)
    starts = np.concatenate([[0], np.cumsum(per_row)[:-1]])
    if isinstance(mask, np.ndarray) and not mask.flags.writeable:
        _support_cache[:] = [mask, flat, starts]
    return flat, starts


def log_softmax(x: Tensor, tape=None) -> Tensor:
    X = x.data
    m = X.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(X - m).sum(axis=1, keepdims=True))
    out = X - lse
    soft = np.exp(out)
    return _emit("log_softmax", (x,), out, lambda g: (g - soft * g.sum(axis=1, keepdims=True),), tape)


def smooth_relu_values(X: np.ndarray, d: float) -> np.ndarray:
    return np.where(X <= 0, 0.0, np.where(X < d, X * X / (2 * d), X - d / 2))


def smooth_relu_slope(X: np.ndarray, d: float) -> np.ndarray:
    return np.clip(X / d, 0.0, 1.0)


def relu_smooth(x: Tensor, d: float, tape=None) -> Tensor:
    """Piecewise smooth ReLU: 0, x^2/(2d), x - d/2."""
    if d <= 0:
        raise ContractError(f"relu_smooth: width must be positive, got {d}")
    X = x.data
    slope = smooth_relu_slope(X, d)
    return _emit("relu_smooth", (x,), smooth_relu_values(X, d), lambda g: (g * slope,), tape)


def relu_smooth_grad(x: Tensor, d: float, tape=None) -> Tensor:
    """Derivative of :func:`relu_smooth`, itself differentiable almost everywhere."""
    if d <= 0:
        raise ContractError(f"relu_smooth_grad: width must be positive, got {d}")
    X = x.data
    inner = ((X > 0) & (X < d)) / d
    return _emit("relu_smooth_grad", (x,), smooth_relu_slope(X, d), lambda g: (g * inner,), tape)


def sum(x: Tensor, axis: int | None = None, tape=None) -> Tensor:  # noqa: A001 - mirrors the op name
    X = x.data
    shape = X.shape
    if axis is None:
        out = np.array([[_sum_all(X)]])
        return _emit("sum", (x,), out, lambda g: (np.full(shape, g[0, 0]),), tape)
    if axis not in (0, 1):
        raise ContractError(f"sum: axis must be None, 0 or 1, got {axis}")
    out = X.sum(axis=axis, keepdims=True)
    return _emit("sum", (x,), out, lambda g: (np.broadcast_to(g, shape).copy(),), tape)


def squared_frobenius_norm(x: Tensor, tape=None) -> Tensor:
    X = x.data
    out = np.array([[_sum_all(X * X)]])
    return _emit("squared_frobenius_norm", (x,), out, lambda g: (2.0 * g[0, 0] * X,), tape)


def frobenius_norm(x: Tensor, tape=None) -> Tensor:
    X = x.data
    n = math.sqrt(_sum_all(X * X))

    def vjp(g):
        if n == 0.0:
            return (np.zeros_like(X),)
        return (g[0, 0] * X / n,)

    return _emit("frobenius_norm", (x,), np.array([[n]]), vjp, tape)


def transpose(x: Tensor, tape=None) -> Tensor:
    return _emit("transpose", (x,), x.data.T, lambda g: (g.T,), tape)


def concat_rows(parts: Sequence[Tensor], tape=None) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ContractError("concat_rows: nothing to concatenate")
    cols = parts[0].cols
    for p in parts[1:]:
        if p.cols != cols:
            raise DimensionError("concat_rows", parts[0].shape, p.shape)
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_rows", parts, np.vstack([p.data for p in parts]), vjp, tape)


def reshape(x: Tensor, rows: int, cols: int, tape=None) -> Tensor:
    if rows * cols != x.data.size:
        raise DimensionError("reshape", x.shape, (rows, cols))
    shape = x.shape
    return _emit("reshape", (x,), x.data.reshape(rows, cols), lambda g: (g.reshape(shape),), tape)


def take_rows(x: Tensor, index, tape=None) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise ContractError(f"take_rows: index out of range for {x.rows} rows")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take_rows", (x,), x.data[idx], vjp, tape)


def weighted_sum(parts: Sequence[Tensor], weights: Sequence[float], tape=None) -> Tensor:
    """sum_i w_i * parts[i] for same-shape tensors and constant weights."""
    parts = tuple(parts)
    w = np.asarray(weights, dtype=np.float64)
    if len(parts) != w.size or not parts:
        raise ContractError("weighted_sum: need one weight per tensor")
    shape = parts[0].shape
    for p in parts[1:]:
        if p.shape != shape:
            raise DimensionError("weighted_sum", shape, p.shape)
    if len(parts) > COMPENSATED_THRESHOLD:
        out = _kahan_weighted(parts, w)
    elif len(parts) <= 4:
        out = np.zeros(shape)
        for wi, p in zip(w, parts):
            out += wi * p.data
    else:
        out = np.tensordot(w, np.stack([p.data for p in parts]), axes=1)
    return _emit("weighted_sum", parts, out, lambda g: tuple(wi * g for wi in w), tape)


def _kahan_weighted(parts, w):
    total = np.zeros(parts[0].shape)
    comp = np.zeros_like(total)
    for wi, p in zip(w, parts):
        y = wi * p.data - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "hadamard": hadamard,
    "divide": divide,
    "scale": scale,
    "row_softmax": row_softmax,
    "log_softmax": log_softmax,
    "relu_smooth": relu_smooth,
    "relu_smooth_grad": relu_smooth_grad,
    "sum": sum,
    "squared_frobenius_norm": squared_frobenius_norm,
    "frobenius_norm": frobenius_norm,
    "transpose": transpose,
    "concat_rows": concat_rows,
    "reshape": reshape,
    "take_rows": take_rows,
    "weighted_sum": weighted_sum,
}

_SEQUENCE_OPS = {"concat_rows", "weighted_sum"}


def primitive_forward(op: str, *inputs, tape=None, **attrs) -> Tensor:
    """Dispatch a primitive by name (``primitive_forward("matmul", a, b)``)."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    if op in _SEQUENCE_OPS:
        return fn(inputs, tape=tape, **attrs)
    return fn(*inputs, tape=tape, **attrs)


# ------------------------------------------------------------------ gradients


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` for every watched tensor on ``tape``.

    Parameters that do not influence the loss receive zeros.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward: loss must be a 1x1 tensor, got {loss.shape}")
    if loss.tape is not tape or loss.uid not in tape._known:
        raise ContractError("backward: loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        for uid, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            prev = grads.get(uid)
            grads[uid] = gi if prev is None else prev + gi
    out = {}
    for uid, shape in tape.parameters.items():
        g = grads.get(uid)
        out[uid] = Tensor._wrap(np.zeros(shape) if g is None else g)
    return out


def finite_diff_gradient(f: Callable[[Tensor], object], x: Tensor, step: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one entry at a time."""
    if step <= 0:
        raise ContractError(f"finite_diff_gradient: step must be positive, got {step}")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = _scalar(f(Tensor(base)))
        flat[i] = orig - step
        fm = _scalar(f(Tensor(base)))
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return Tensor._wrap(grad)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor._wrap(np.zeros((rows, cols)))


def eye(n: int) -> Tensor:
    return Tensor._wrap(np.eye(n))


def stack_values(tensors: Iterable[Tensor]) -> np.ndarray:
    return np.array([t.item() for t in tensors])
