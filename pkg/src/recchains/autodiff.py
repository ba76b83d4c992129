"""A small reverse-mode differentiation tape over dense numpy arrays.

Every op appends one node to the :class:`Tape` that owns its inputs, so the
node list is topologically ordered by construction and :func:`backward` is a
single reverse sweep.  Only the primitives needed by the recursive embedding
generator and the factorization loss are provided.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("tape", "index", "value", "requires_grad")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    # inputs are (node index, requires_grad) pairs; values stay alive only
    # through the closures that need them for the backward pass
    __slots__ = ("op", "inputs", "vjp", "name")

    def __init__(self, op, inputs, vjp, name=None):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


class Tape:
    """Append-only record of operations."""

    def __init__(self, dtype=np.float64, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.dtype = dtype
        self.check_finite = check_finite
        self.leaves: dict[str, Tensor] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> Tensor:
        value = np.asarray(value, dtype=self.dtype)
        t = self._push("leaf", (), value, None, requires_grad, name)
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = t
        return t

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def _push(self, op, inputs, value, vjp, requires_grad, name=None) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by {op}")
        if requires_grad:
            node = _Node(op, tuple((t.index, t.requires_grad) for t in inputs), vjp, name)
        else:
            node = _Node(op, (), None, name)
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1, value, requires_grad)


def _tape_of(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise ValueError("tensors belong to different tapes")
    return tape


def _record(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    needs = any(t.requires_grad for t in inputs)
    return tape._push(op, tuple(inputs), value, vjp, needs)


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else like.tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.value + b.value, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record("mul", (a, b), av * bv, lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.value * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows, as one node."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    xv, wv = x.value, w.value
    out = xv @ wv
    out += b.value
    return _record("linear", (x, w, b), out, lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0  # subgradient at exactly 0 is 0
    return _record("relu", (a,), a.value * mask, lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    av = a.value
    return _record("square", (a,), av * av, lambda g: (2.0 * av * g,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _record("sum", (a,), np.asarray(a.value.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
    if not -len(shape) <= axis < len(shape):
        raise ShapeError(f"sum: axis {axis} out of range for shape {shape}")

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", (a,), a.value.sum(axis=axis), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    shapes = [t.shape for t in tensors]
    ndim = len(shapes[0])
    ax = axis % ndim
    for s in shapes:
        if len(s) != ndim or any(s[d] != shapes[0][d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    bounds = np.cumsum([0] + [s[ax] for s in shapes])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(shapes)))

    return _record("concat", tuple(tensors), np.concatenate([t.value for t in tensors], axis=ax), vjp)


def gather(a: Tensor, index) -> Tensor:
    """Rows ``a[index]``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError("gather: index must be 1-D")
    if len(index) and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"gather: index out of range for shape {a.shape}")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _record("gather", (a,), a.value[index], vjp)


def mean_over_set(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors."""
    if not tensors:
        raise ShapeError("mean_over_set: empty set")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError(f"mean_over_set: shapes differ {[t.shape for t in tensors]}")
    n = len(tensors)
    value = np.add.reduce([t.value for t in tensors]) / n
    return _record("mean_over_set", tuple(tensors), value, lambda g: tuple(g / n for _ in range(n)))


def segment_mean(a: Tensor, segments, num_segments: int) -> Tensor:
    """Batched :func:`mean_over_set`: row ``s`` of the result is the mean of
    the rows of ``a`` whose segment id is ``s``.  Every segment must be
    non-empty."""
    segments = np.asarray(segments, dtype=np.int64)
    if a.value.ndim != 2 or len(segments) != a.shape[0]:
        raise ShapeError(f"segment_mean: {len(segments)} segment ids for shape {a.shape}")
    counts = np.bincount(segments, minlength=num_segments).astype(a.value.dtype)
    if len(counts) != num_segments or np.any(counts == 0):
        raise ShapeError("segment_mean: every segment needs at least one row")
    if np.all(segments[1:] >= segments[:-1]):
        starts = np.concatenate([[0], np.cumsum(counts[:-1])]).astype(np.int64)
        sums = np.add.reduceat(a.value, starts, axis=0)
    else:
        sums = np.zeros((num_segments, a.shape[1]), dtype=a.value.dtype)
        np.add.at(sums, segments, a.value)
    inv = (1.0 / counts)[:, None]
    return _record("segment_mean", (a,), sums * inv, lambda g: ((g * inv)[segments],))


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of scalar ``loss`` for the leaves it reaches, keyed by node index.

    Use :func:`leaf_grads` to get the gradients keyed by leaf name.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for idx in range(loss.index, -1, -1):
        node = tape.nodes[idx]
        if node.vjp is None:
            continue
        g = grads.pop(idx, None)  # interior gradients are dropped once propagated
        if g is None:
            continue
        for (j, needs), gi in zip(node.inputs, node.vjp(g)):
            if not needs:
                continue
            prev = grads.get(j)
            grads[j] = gi if prev is None else prev + gi
    return grads


def leaf_grads(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients for every named leaf on ``loss``'s tape; unreachable leaves get zeros."""
    grads = backward(loss)
    out = {}
    for name, t in loss.tape.leaves.items():
        if not t.requires_grad:
            continue
        g = grads.get(t.index)
        out[name] = np.zeros_like(t.value) if g is None else g.reshape(t.shape)
    return out
