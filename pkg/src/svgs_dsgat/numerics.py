"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that sees an input with ``requires_grad`` records a node
holding its inputs and a backward closure. :func:`backward` linearises the
graph reachable from a scalar root into a :class:`ComputationTape` and
replays it in reverse.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS = 1e-12

_state = threading.local()


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_scalar()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_scalar():
    raise ShapeError("item() needs a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _wrap(data: np.ndarray) -> Tensor:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out._node = None
    return out


def _result(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward) -> Tensor:
    out = _wrap(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable = field(repr=False)


class ComputationTape:
    """Topologically ordered records of the graph below a root tensor."""

    def __init__(self, records: list[TapeRecord], tensors: dict[int, Tensor]):
        self.records = records
        self.tensors = tensors

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def from_root(cls, root: Tensor) -> ComputationTape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for parent in reversed(t._node.inputs):
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        tensors = {}
        records = []
        for t in order:
            tensors[id(t)] = t
            if t._node is not None:
                for p in t._node.inputs:
                    tensors[id(p)] = p
                records.append(
                    TapeRecord(t._node.op, tuple(id(p) for p in t._node.inputs), id(t), t._node.backward)
                )
        return cls(records, tensors)

    def replay(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for tid, ig in zip(rec.inputs, in_grads):
                if ig is None or not self.tensors[tid].requires_grad:
                    continue
                if tid in grads:
                    grads[tid] = grads[tid] + ig
                else:
                    grads[tid] = ig
        # what remains are leaves (and the root itself when it is a leaf)
        for tid, g in grads.items():
            t = self.tensors[tid]
            if t._node is None and t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every requires-grad leaf."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    ComputationTape.from_root(root).replay(root)


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _floor_magnitude(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < EPS, np.where(x < 0, -EPS, EPS), x)


def div(a, b) -> Tensor:
    """a / b with |b| floored at 1e-12 (sign kept, zero treated as positive)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    safe = _floor_magnitude(b.data)
    live = np.abs(b.data) >= EPS
    out = a.data / safe

    def back(g):
        ga = _unbroadcast(g / safe, a.shape)
        gb = _unbroadcast(np.where(live, -g * out / safe, 0.0), b.shape)
        return ga, gb

    return _result(out, (a, b), "div", back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError below
        out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log with the input clamped to [1e-12, inf)."""
    a = as_tensor(a)
    live = a.data >= EPS
    x = np.maximum(a.data, EPS)
    return _result(np.log(x), (a,), "log", lambda g: (np.where(live, g / x, 0.0),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)
    # d sqrt(0) is unbounded; the floor keeps chains like sqrt(sum(d**2)) finite at d=0
    return _result(out, (a,), "sqrt", lambda g: (0.5 * g / np.maximum(out, EPS),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), "square", lambda g: (2.0 * a.data * g,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    ez = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return _result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def identity(a) -> Tensor:
    return as_tensor(a)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), "sum", back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def l2norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at the zero vector is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def back(g):
        o = out
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            o = np.expand_dims(o, axis)
        return (np.where(o > 0, g * a.data / np.where(o > 0, o, 1.0), 0.0),)

    return _result(out, (a,), "l2norm", back)


def tmax(a, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _result(out, (a,), "max", back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _result(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _result(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape[1]} and {b.shape[0]} differ")
    return _result(
        a.data @ b.data,
        (a, b),
        "matmul",
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T (+ bias)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# indexing, scatter and graph helpers
# ---------------------------------------------------------------------------


def _scatter_matrix(index: np.ndarray, n: int):
    """Sparse (n, len(index)) 0/1 matrix summing rows into ``index`` slots."""
    import scipy.sparse as sp

    m = len(index)
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


def _scatter(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    flat = values.reshape(len(index), -1)
    out = np.asarray(_scatter_matrix(index, n) @ flat)
    return out.reshape((n,) + values.shape[1:])


def gather_rows(a, index) -> Tensor:
    """``a[index]`` along the first axis; index may have any integer shape."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    out = a.data[index]

    def back(g):
        flat = g.reshape((index.size,) + a.shape[1:])
        return (_scatter(flat, index.reshape(-1), a.shape[0]),)

    return _result(out, (a,), "gather", back)


def scatter_add_rows(a, index, n: int) -> Tensor:
    """Row ``r`` of ``a`` is added into output row ``index[r]``; output has n rows."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != a.shape[:1]:
        raise ShapeError("scatter index must have one entry per row")
    out = _scatter(a.data, index, n)
    return _result(out, (a,), "scatter_add", lambda g: (g[index],))


def spmm(matrix, a) -> Tensor:
    """Constant sparse (or dense) matrix times tensor."""
    a = as_tensor(a)
    if matrix.shape[1] != a.shape[0]:
        raise ShapeError(f"spmm: {matrix.shape} by {a.shape}")
    out = np.asarray(matrix @ a.data)
    mt = matrix.T
    return _result(out, (a,), "spmm", lambda g: (np.asarray(mt @ g),))


def _segment_max_data(x: np.ndarray, seg: np.ndarray, n_seg: int) -> np.ndarray:
    m = np.full((n_seg,) + x.shape[1:], -np.inf)
    np.maximum.at(m, seg, x)
    return m


def softmax(a) -> Tensor:
    """Numerically stable softmax of a 1-D tensor."""
    a = as_tensor(a)
    if a.ndim != 1 or a.size == 0:
        raise ShapeError("softmax expects a nonempty vector")
    return segment_softmax(a, np.zeros(a.size, dtype=np.intp), 1)


def segment_softmax(a, segments, n_segments: int) -> Tensor:
    """Softmax of a 1-D tensor taken independently within each segment id."""
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.intp)
    if a.ndim != 1 or seg.shape != a.shape:
        raise ShapeError("segment_softmax expects a vector and matching segment ids")
    if a.size == 0:
        raise ShapeError("segment_softmax of an empty vector")
    shifted = a.data - _segment_max_data(a.data, seg, n_segments)[seg]
    e = np.exp(shifted)
    z = np.bincount(seg, weights=e, minlength=n_segments)
    out = e / z[seg]

    def back(g):
        dot = np.bincount(seg, weights=out * g, minlength=n_segments)
        return (out * (g - dot[seg]),)

    return _result(out, (a,), "segment_softmax", back)


def segment_max(a, segments, n_segments: int) -> Tensor:
    """Column-wise max over rows sharing a segment id; output (n_segments, ...)."""
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.intp)
    out = _segment_max_data(a.data, seg, n_segments)
    if not np.all(np.isfinite(out)):
        raise ShapeError("segment_max: a segment has no rows")
    # first row attaining the max in each (segment, column)
    hit = a.data == out[seg]
    order = np.arange(a.shape[0]).reshape((-1,) + (1,) * (a.ndim - 1))
    first = np.full(out.shape, a.shape[0])
    np.minimum.at(first, seg, np.where(hit, order, a.shape[0]))
    winner = hit & (order == first[seg])

    def back(g):
        return (np.where(winner, g[seg], 0.0),)

    return _result(out, (a,), "segment_max", back)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_diff_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not 0 < h <= 1e-2:
        raise ValueError("step h must lie in (0, 1e-2]")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(Tensor(base)))
            flat[i] = orig - h
            fm = _scalar(f(Tensor(base)))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def _scalar(v) -> float:
    val = float(as_tensor(v).data.reshape(-1)[0]) if not isinstance(v, float) else v
    if not np.isfinite(val):
        raise NumericError("function returned a non-finite value")
    return val


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor) over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
