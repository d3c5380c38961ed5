"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are row-major numpy arrays. Every operation validates that its result
is finite: NaN or Inf anywhere is a contract violation and raises
``NonFiniteError`` naming the offending operation instead of propagating.

Gradients are plain numpy arrays accumulated on the ``grad`` attribute by
``Tensor.backward()``, which walks the recorded graph in reverse topological
order. Only first-order gradients are supported. Tensors are treated as
immutable after construction; the one sanctioned exception is an optimizer
mutating ``data`` in place between forward passes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NumericsError",
    "NonFiniteError",
    "DegenerateInputError",
    "ShapeError",
    "matmul",
    "dot",
    "relu",
    "concat",
    "stack",
    "mean_pool",
    "layer_norm",
    "softmax",
    "softmax_rows",
    "cosine_sim",
]


class NumericsError(Exception):
    """Base class for failures raised by the numeric core."""


class NonFiniteError(NumericsError):
    """A tensor operation produced NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"operation '{op}' produced non-finite values")
        self.op = op


class DegenerateInputError(NumericsError):
    """An input is well-shaped but numerically degenerate (e.g. zero norm)."""


class ShapeError(NumericsError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf", _parents=()):
        if type(data) is np.ndarray and data.dtype == np.float64 and data.flags.c_contiguous:
            arr = data
        else:
            arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.isfinite(arr).all():
            raise NonFiniteError(op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = None

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
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values cut off from the recorded graph."""
        return Tensor(self.data, op="detach")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it."""
        if self.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        if not self.requires_grad:
            raise NumericsError("backward() on a tensor that does not require grad")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operators -------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    # -- method-style ops --------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, op=op, _parents=parents if requires else ())


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``g`` back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squashed = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if squashed:
        g = g.sum(axis=squashed, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        out = _from_op(a.data + b, (a,), "add")
        if out.requires_grad:
            def _bw(g):
                a._accumulate(g)
            out._backward = _bw
        return out
    a, b = _coerce(a), _coerce(b)
    out = _from_op(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = _from_op(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        out = _from_op(a.data * b, (a,), "mul")
        if out.requires_grad:
            def _bw(g):
                a._accumulate(g * b)
            out._backward = _bw
        return out
    a, b = _coerce(a), _coerce(b)
    out = _from_op(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    with np.errstate(all="ignore"):
        data = a.data / b.data
    out = _from_op(data, (a, b), "div")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * out.data / b.data, b.data.shape))
        out._backward = _bw
    return out


def neg(a) -> Tensor:
    a = _coerce(a)
    out = _from_op(-a.data, (a,), "neg")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(-g)
        out._backward = _bw
    return out


def exp(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(all="ignore"):
        data = np.exp(a.data)
    out = _from_op(data, (a,), "exp")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g * out.data)
        out._backward = _bw
    return out


def log(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(all="ignore"):
        data = np.log(a.data)
    out = _from_op(data, (a,), "log")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g / a.data)
        out._backward = _bw
    return out


def sqrt(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(all="ignore"):
        data = np.sqrt(a.data)
    out = _from_op(data, (a,), "sqrt")
    if out.requires_grad:
        # grad is unbounded as the input approaches zero; callers guard that case
        def _bw(g):
            a._accumulate(g * 0.5 / out.data)
        out._backward = _bw
    return out


def relu(a) -> Tensor:
    a = _coerce(a)
    out = _from_op(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g * (a.data > 0.0))
        out._backward = _bw
    return out


# -- contractions ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires operands with ndim >= 2")
    out = _from_op(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.data.shape))
        out._backward = _bw
    return out


def dot(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot requires two equal-length vectors")
    out = _from_op(a.data @ b.data, (a, b), "dot")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)
        out._backward = _bw
    return out


# -- reductions and reshapes --------------------------------------------------


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape))
        out._backward = _bw
    return out


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = _from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        count = a.data.size // max(out.data.size, 1)
        def _bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape) / count)
        out._backward = _bw
    return out


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = _from_op(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g.reshape(a.data.shape))
        out._backward = _bw
    return out


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = _from_op(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(np.transpose(g, inverse))
        out._backward = _bw
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat requires at least one tensor")
    out = _from_op(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)
        def _bw(g):
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(index)])
        out._backward = _bw
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("stack requires at least one tensor")
    out = _from_op(np.stack([t.data for t in ts], axis=axis), tuple(ts), "stack")
    if out.requires_grad:
        def _bw(g):
            for i, t in enumerate(ts):
                if t.requires_grad:
                    t._accumulate(np.take(g, i, axis=axis))
        out._backward = _bw
    return out


def mean_pool(a, axis: int = -2) -> Tensor:
    """Mean over the sequence axis: [..., L, D] -> [..., D]."""
    a = _coerce(a)
    if a.ndim < 2:
        raise ShapeError("mean_pool requires ndim >= 2")
    return tensor_mean(a, axis=axis)


# -- composites ---------------------------------------------------------------


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_sigma
    out = _from_op(normed * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:
        def _bw(g):
            if bias.requires_grad:
                bias._accumulate(_unbroadcast(g, bias.data.shape))
            if gain.requires_grad:
                gain._accumulate(_unbroadcast(g * normed, gain.data.shape))
            if x.requires_grad:
                d_normed = g * gain.data
                mean_d = d_normed.mean(axis=-1, keepdims=True)
                mean_dn = np.mean(d_normed * normed, axis=-1, keepdims=True)
                x._accumulate((d_normed - mean_d - normed * mean_dn) * inv_sigma)
        out._backward = _bw
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    x = _coerce(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _from_op(s, (x,), "softmax")
    if out.requires_grad:
        def _bw(g):
            inner = np.sum(g * s, axis=axis, keepdims=True)
            x._accumulate((g - inner) * s)
        out._backward = _bw
    return out


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a matrix; each output row sums to 1."""
    x = _coerce(x)
    if x.ndim != 2:
        raise ShapeError("softmax_rows expects a matrix")
    return softmax(x, axis=1)


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two vectors, differentiable in both.

    Raises ``DegenerateInputError`` if either vector has zero norm rather
    than silently dividing by zero.
    """
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape or a.size < 1:
        raise ShapeError("cosine_sim requires two equal-length vectors")
    norm_a = sqrt(dot(a, a))
    norm_b = sqrt(dot(b, b))
    if norm_a.item() == 0.0 or norm_b.item() == 0.0:
        raise DegenerateInputError("cosine_sim received a zero-norm vector")
    return div(dot(a, b), mul(norm_a, norm_b))
