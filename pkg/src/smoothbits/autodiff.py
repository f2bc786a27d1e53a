"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records primitive operations as they execute; ``Tape.backward``
replays them in reverse to accumulate exact analytic gradients.  Tensors
that are not attached to a tape behave as constants, so the same forward
code serves both training (with gradients) and plain evaluation.

Supported shapes are scalars (0-d), vectors and matrices.  Broadcasting is
deliberately restricted to scalar-vs-array and row-vector-vs-matrix, which
covers feed-forward models and keeps gradient reduction rules obvious.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "NumericsError",
    "GradCheckReport",
    "grad_check",
    "add", "sub", "mul", "div", "neg", "exp", "log", "log1p", "sqrt",
    "power", "sigmoid", "tanh", "logit", "softplus", "logaddexp",
    "matmul", "affine", "tsum", "tmean", "maximum_const", "clamp",
    "concat", "stop_gradient", "where",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class DomainError(ValueError):
    """A constant input lies outside the mathematical domain of an op."""


class NumericsError(FloatingPointError):
    """NaN produced while the tape's NaN trap is armed."""


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"tensors are limited to rank <= 2, got shape {arr.shape}")
    return arr


class Tensor:
    """Dense float64 array, optionally recorded on a differentiation tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = _as_array(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_constant(self) -> bool:
        return self.tape is None

    @property
    def grad(self) -> np.ndarray | None:
        """Gradient accumulated by the last backward pass, if any."""
        if self.tape is None or self.node is None:
            return None
        return self.tape.grad_of(self)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = "const" if self.tape is None else f"node {self.node}"
        return f"Tensor({self.data!r}, {tag})"

    # operator sugar; python scalars and ndarrays lift to constants
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None
    shape: tuple[int, ...]


class Tape:
    """Append-only record of primitive ops; replayed in reverse by backward.

    A tape and its tensors belong to one thread; independent tapes never
    share state.  Build a fresh tape per training step.
    """

    def __init__(self, nan_trap: bool = False):
        self.nan_trap = nan_trap
        self._nodes: list[_Node] = []
        self._grads: list[np.ndarray | None] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value, op: str = "leaf") -> Tensor:
        """Record ``value`` as a differentiable leaf (a parameter)."""
        data = _as_array(value)
        self._nodes.append(_Node(op, (), None, data.shape))
        return Tensor(data, self, len(self._nodes) - 1)

    def _record(self, op: str, data: np.ndarray,
                parents: tuple[int, ...], vjp) -> Tensor:
        if self.nan_trap and np.any(np.isnan(data)):
            raise NumericsError(f"NaN produced by op '{op}'")
        self._nodes.append(_Node(op, parents, vjp, data.shape))
        return Tensor(data, self, len(self._nodes) - 1)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(node) for every node reachable from root.

        Visits nodes in strict reverse insertion order exactly once.
        Leaves that do not influence root keep zero gradient.
        """
        if root.tape is not self:
            raise ValueError("root tensor is not recorded on this tape")
        if root.data.shape != ():
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[root.node] = np.ones(())
        for idx in range(root.node, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self._nodes[idx]
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if grads[parent] is None:
                    grads[parent] = np.zeros(self._nodes[parent].shape)
                grads[parent] = grads[parent] + pg
        self._grads = grads

    def grad_of(self, t: Tensor) -> np.ndarray:
        if t.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        if not self._grads:
            raise RuntimeError("backward has not been run on this tape")
        g = self._grads[t.node]
        if g is None:
            return np.zeros(self._nodes[t.node].shape)
        return np.asarray(g, dtype=np.float64)


# ---------------------------------------------------------------------------
# op plumbing

def _find_tape(tensors: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor],
          grad_fns: Sequence[Callable[[np.ndarray], np.ndarray]]) -> Tensor:
    """Record the op if any input is on a tape, else return a constant."""
    tape = _find_tape(inputs)
    if tape is None:
        return Tensor(data)
    parents, fns = [], []
    for t, fn in zip(inputs, grad_fns):
        if t.tape is not None:
            parents.append(t.node)
            fns.append(fn)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(fn(g) for fn in fns)

    return tape._record(op, data, tuple(parents), vjp)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    # row vector against matrix (bias-style) in either order
    if len(sa) == 1 and len(sb) == 2 and sb[1] == sa[0]:
        return
    if len(sb) == 1 and len(sa) == 2 and sa[1] == sb[0]:
        return
    raise ShapeError(f"op '{op}': shapes {sa} and {sb} do not conform")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.sum(g)
    # (n,) operand broadcast across matrix rows
    return np.sum(g, axis=0).reshape(shape)


def _elementwise2(op: str, a, b, fa, fb) -> Tensor:
    """Binary elementwise op; fa/fb map output grad to operand grad."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(op, a.data, b.data)
    data = _OP_FORWARD[op](a.data, b.data)
    ga = lambda g: _reduce_to(fa(g, a.data, b.data, data), a.data.shape)
    gb = lambda g: _reduce_to(fb(g, a.data, b.data, data), b.data.shape)
    return _emit(op, data, (a, b), (ga, gb))


_OP_FORWARD = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "logaddexp": np.logaddexp,
}


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a, b) -> Tensor:
    return _elementwise2("add", a, b,
                         lambda g, x, y, o: g,
                         lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _elementwise2("sub", a, b,
                         lambda g, x, y, o: g,
                         lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _elementwise2("mul", a, b,
                         lambda g, x, y, o: g * y,
                         lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _elementwise2("div", a, b,
                         lambda g, x, y, o: g / y,
                         lambda g, x, y, o: -g * x / (y * y))


def logaddexp(a, b) -> Tensor:
    """log(e^a + e^b), stable; partials are the two softmax weights."""
    return _elementwise2("logaddexp", a, b,
                         lambda g, x, y, o: g * expit(x - y),
                         lambda g, x, y, o: g * expit(y - x))


def _unary(op: str, x, data: np.ndarray, dfn) -> Tensor:
    x = as_tensor(x)
    return _emit(op, data, (x,), (lambda g: g * dfn(x.data, data),))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _unary("neg", x, -x.data, lambda v, o: -np.ones_like(v))


def exp(x) -> Tensor:
    x = as_tensor(x)
    return _unary("exp", x, np.exp(x.data), lambda v, o: o)


def log(x) -> Tensor:
    x = as_tensor(x)
    if x.is_constant and np.any(x.data <= 0.0):
        raise DomainError("log of non-positive constant")
    return _unary("log", x, np.log(x.data), lambda v, o: 1.0 / v)


def log1p(x) -> Tensor:
    x = as_tensor(x)
    if x.is_constant and np.any(x.data <= -1.0):
        raise DomainError("log1p of constant <= -1")
    return _unary("log1p", x, np.log1p(x.data), lambda v, o: 1.0 / (1.0 + v))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if x.is_constant and np.any(x.data < 0.0):
        raise DomainError("sqrt of negative constant")
    return _unary("sqrt", x, np.sqrt(x.data), lambda v, o: 0.5 / o)


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    if x.is_constant and p != int(p) and np.any(x.data < 0.0):
        raise DomainError("fractional power of negative constant")
    return _unary("power", x, x.data ** p, lambda v, o: p * v ** (p - 1.0))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    return _unary("sigmoid", x, expit(x.data), lambda v, o: o * (1.0 - o))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    return _unary("tanh", x, np.tanh(x.data), lambda v, o: 1.0 - o * o)


def logit(x) -> Tensor:
    x = as_tensor(x)
    if x.is_constant and np.any((x.data <= 0.0) | (x.data >= 1.0)):
        raise DomainError("logit of constant outside (0, 1)")
    data = np.log(x.data) - np.log1p(-x.data)
    return _unary("logit", x, data, lambda v, o: 1.0 / (v * (1.0 - v)))


def softplus(x) -> Tensor:
    """log(1 + e^x) computed without overflow; derivative is sigmoid."""
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    return _unary("softplus", x, data, lambda v, o: expit(v))


def maximum_const(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    data = np.maximum(x.data, c)
    return _unary("maximum_const", x, data,
                  lambda v, o: (v >= c).astype(np.float64))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)
    return _unary("clamp", x, data,
                  lambda v, o: ((v >= lo) & (v <= hi)).astype(np.float64))


def where(mask, a, b) -> Tensor:
    """Select a or b by a constant boolean mask (not differentiated)."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    data = np.where(m, a.data, b.data)
    ga = lambda g: _reduce_to(np.where(m, g, 0.0), a.data.shape)
    gb = lambda g: _reduce_to(np.where(m, 0.0, g), b.data.shape)
    return _emit("where", data, (a, b), (ga, gb))


def stop_gradient(x) -> Tensor:
    """Detach from the tape; the value flows but no gradient does."""
    x = as_tensor(x)
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul requires matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    ga = lambda g: g @ b.data.T
    gb = lambda g: a.data.T @ g
    return _emit("matmul", data, (a, b), (ga, gb))


def affine(x, w, b) -> Tensor:
    """x @ w + b for a batch of rows; b broadcasts across the batch."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"affine requires matrices, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine shapes do not conform: {x.shape}, {w.shape}, {b.shape}")
    data = x.data @ w.data + b.data
    gx = lambda g: g @ w.data.T
    gw = lambda g: x.data.T @ g
    gb = lambda g: np.sum(g, axis=0)
    return _emit("affine", data, (x, w, b), (gx, gw, gb))


def tsum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    data = np.sum(x.data, axis=axis)

    def gx(g):
        if axis is None:
            return np.broadcast_to(g, x.data.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy()

    return _emit("sum", np.asarray(data), (x,), (gx,))


def tmean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    data = np.mean(x.data, axis=axis)

    def gx(g):
        if axis is None:
            return np.broadcast_to(g / n, x.data.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape).copy()

    return _emit("mean", np.asarray(data), (x,), (gx,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ndims = {t.data.ndim for t in ts}
    if len(ndims) != 1:
        raise ShapeError("concat operands must share rank")
    data = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in ts])

    def make_slice(i):
        def gx(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return gx

    return _emit("concat", data, ts, tuple(make_slice(i) for i in range(len(ts))))


# ---------------------------------------------------------------------------
# finite-difference gradient checking

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_index: int
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f: Callable[[Tensor], Tensor], x0, h: float = 1e-5,
               tol: float = 1e-5) -> GradCheckReport:
    """Compare the tape gradient of ``f`` with central finite differences.

    ``f`` maps a parameter vector (Tensor) to a scalar Tensor.  The relative
    error denominator is max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.asarray(x0, dtype=np.float64)

    tape = Tape()
    x = tape.leaf(x0)
    y = f(x)
    if y.data.shape != ():
        raise ShapeError("grad_check target must return a scalar")
    tape.backward(y)
    analytic = np.asarray(tape.grad_of(x), dtype=np.float64).reshape(x0.shape)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * h
            val = f(Tensor(probe.reshape(x0.shape))).item()
            if np.isnan(val):
                raise NumericsError(f"f returned NaN probing coordinate {i}")
            num_flat[i] += sign * val
        num_flat[i] /= 2.0 * h

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(bool(np.max(rel) <= tol), float(np.max(rel)),
                           worst, tol, analytic, numeric)
