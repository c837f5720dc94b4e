"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable quantity in the package (points, features, weights,
latent codes) is a :class:`Tensor`. Operations record their inputs and a
vector-Jacobian closure; :meth:`Tensor.backward` replays them in reverse
topological order.

Conventions:
  * ``sign(0) = 0`` for ``abs``.
  * ``reduce_max`` routes gradient to the first (lowest index) maximum.
  * ``leaky_relu`` uses the negative-side slope at exactly 0.
  * Leaf gradients accumulate across ``backward`` calls until
    :meth:`Tensor.zero_grad`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import branches

DEFAULT_DTYPE = np.float32


def _contiguous(a: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would turn 0-d results into shape (1,)
    return a if a.flags.c_contiguous else a.copy(order="C")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, a, b):
        self.op = op
        self.shapes = (tuple(a), tuple(b))
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(values, Tensor):
            values = values.values
        dtype = DEFAULT_DTYPE if dtype is None else dtype
        self.values = _contiguous(np.asarray(values, dtype=dtype))
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @classmethod
    def _from_op(cls, values: np.ndarray, parents: Sequence["Tensor"], vjp: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values, dtype=self.values.dtype)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.values)

    # -- backward ---------------------------------------------------------

    def backward(self) -> None:
        """Populate gradients of all reachable ``requires_grad`` tensors."""
        if self.values.size != 1:
            raise ShapeError("backward (loss must be scalar)", self.shape, ())
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(x, np.ndarray) and x.dtype.kind == "f":
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return Tensor._from_op(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return Tensor._from_op(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    av, bv = a.values, b.values
    return Tensor._from_op(
        av * bv,
        (a, b),
        lambda g: (
            _unbroadcast(g * bv, a.shape) if a.requires_grad else None,
            _unbroadcast(g * av, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    av, bv = a.values, b.values
    return Tensor._from_op(
        av / bv,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * av / (bv * bv), b.shape) if b.requires_grad else None,
        ),
    )


# -- linear algebra and structure ----------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a: [..., m, k]`` and ``b: [k, n]`` (or batched ``b``)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)
        if b.requires_grad:
            if bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(av @ bv, (a, b), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis (or ``axis``)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._from_op(np.concatenate([t.values for t in tensors], axis=ax), tensors, vjp)


def gather_rows(t: Tensor, idx) -> Tensor:
    """``t[idx]`` for ``t: [N, D]`` and integer ``idx: [M]``; backward is scatter-add."""
    idx = np.asarray(idx)
    if t.ndim != 2:
        raise ShapeError("gather_rows (expects [N, D])", t.shape, idx.shape)
    if idx.ndim != 1 or idx.dtype.kind not in "iu":
        raise ShapeError("gather_rows (expects integer [M] indices)", t.shape, idx.shape)
    n = t.shape[0]
    if idx.size:
        lo, hi = int(idx.min()), int(idx.max())
        if lo < 0 or hi >= n:
            bad = lo if lo < 0 else hi
            raise IndexError(f"gather_rows: index {bad} out of range for {n} rows")

    def vjp(g):
        m = len(idx)
        scatter = sp.csr_matrix((np.ones(m, dtype=g.dtype), (idx, np.arange(m))), shape=(n, m))
        return (np.asarray(scatter @ g),)

    return Tensor._from_op(t.values[idx], (t,), vjp)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(t: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def vjp(g):
        out = np.zeros(t.shape, dtype=g.dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(_contiguous(np.asarray(t.values[index])), (t,), vjp)


def reshape(t: Tensor, shape) -> Tensor:
    try:
        out = t.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", t.shape, shape) from None
    return Tensor._from_op(out, (t,), lambda g: (g.reshape(t.shape),))


def broadcast_to(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(t.values, shape)
    except ValueError:
        raise ShapeError("broadcast_to", t.shape, shape) from None
    return Tensor._from_op(_contiguous(out), (t,), lambda g: (_unbroadcast(g, t.shape),))


# -- reductions ------------------------------------------------------------


def reduce_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = t.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (t,), vjp)


def reduce_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = t.values.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([t.shape[a] for a in axes]))
    return mul(reduce_sum(t, axis, keepdims), 1.0 / count)


def reduce_max(t: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis``; returns ``(values, argmax)``. Ties go to the lowest index."""
    axis = axis % t.ndim
    v = t.values
    size = v.shape[axis]
    if axis == v.ndim - 1 or size > 64:
        arg = np.argmax(v, axis=axis)
        out = np.take_along_axis(v, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    else:
        # short strided axis: scan from the back so the lowest index wins ties
        out = v.max(axis=axis)
        moved = np.moveaxis(v, axis, 0)
        arg = np.full(out.shape, size - 1, dtype=np.int16)
        for j in range(size - 2, -1, -1):
            np.copyto(arg, j, where=moved[j] == out)
        arg = arg.astype(np.int64)
    branches.note("reduce_max", arg)
    shape_k = [1] * v.ndim
    shape_k[axis] = size

    def vjp(g):
        hit = np.expand_dims(arg, axis) == np.arange(size).reshape(shape_k)
        return (hit * np.expand_dims(g, axis),)

    return Tensor._from_op(out, (t,), vjp), arg


# -- elementwise unary -----------------------------------------------------


def leaky_relu(t: Tensor, slope: float = 0.2) -> Tensor:
    v = t.values
    s = v.dtype.type(slope)
    out = np.maximum(v, v * s) if 0 <= slope <= 1 else np.where(v > 0, v, v * s)
    if branches.enabled():
        branches.note("leaky_relu", v > 0)

    def vjp(g):
        scale = (v > 0).astype(g.dtype)
        scale *= 1 - s
        scale += s
        return (g * scale,)

    return Tensor._from_op(out, (t,), vjp)


def abs(t: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    v = t.values
    if branches.enabled():
        branches.note("abs", np.sign(v))
    return Tensor._from_op(np.abs(v), (t,), lambda g: (g * np.sign(v),))


def sqrt(t: Tensor) -> Tensor:
    out = np.sqrt(t.values)
    return Tensor._from_op(out, (t,), lambda g: (g * 0.5 / out,))


def square(t: Tensor) -> Tensor:
    v = t.values
    return Tensor._from_op(v * v, (t,), lambda g: (g * 2 * v,))


def sin(t: Tensor) -> Tensor:
    v = t.values
    return Tensor._from_op(np.sin(v), (t,), lambda g: (g * np.cos(v),))


def cos(t: Tensor) -> Tensor:
    v = t.values
    return Tensor._from_op(np.cos(v), (t,), lambda g: (-g * np.sin(v),))
