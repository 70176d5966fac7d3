"""Dense rank-<=3 tensors with reverse-mode automatic differentiation.

Everything is float64. Broadcasting follows trailing-axis alignment with
size-1 expansion only, and ranks never exceed 3 ([batch, seq, feature]).
Gradients accumulate (sum) on reuse; call zero_grad before the next step.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError, UsageError, VocabularyError

MAX_RANK = 3

_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """Backward-graph record: operation tag plus parent references."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """A dense float64 array with an optional gradient and graph link."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward_fn):
    """Wrap op output, attaching a graph node when any parent needs grad."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p.node is not None for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the parent's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    if a.shape == b.shape:
        return
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if len(out_shape) > MAX_RANK:
        raise DimensionError(f"{op}: result rank {len(out_shape)} exceeds maximum rank {MAX_RANK}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, factor):
    """Multiply by a scalar (python float or single-element tensor)."""
    return mul(a, factor)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def sigmoid(a):
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# shape manipulation


def concat(tensors, axis=-1):
    """Concatenate along an axis; non-concat axes must match exactly."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concat of zero tensors")
    ndim = tensors[0].ndim
    ax = axis % ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != base[i] for i in range(ndim) if i != ax):
            raise DimensionError(
                f"concat: shape {t.shape} incompatible with {tensors[0].shape} on non-concat axes"
            )
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors), backward_fn)


def stack(tensors, axis=0):
    """Stack equal-shaped tensors along a new axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("stack of zero tensors")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"stack: shape {t.shape} differs from {shape}")
    out = np.stack([t.data for t in tensors], axis=axis)
    if out.ndim > MAX_RANK:
        raise DimensionError(f"stack: result rank {out.ndim} exceeds maximum rank {MAX_RANK}")
    ax = axis % out.ndim

    def backward_fn(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(out, "stack", tuple(tensors), backward_fn)


def reshape(a, shape):
    a = _as_tensor(a)
    if len(shape) > MAX_RANK:
        raise DimensionError(f"reshape: rank {len(shape)} exceeds maximum rank {MAX_RANK}")
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def index_axis(a, axis, i):
    """Select index i along an axis, dropping that axis."""
    a = _as_tensor(a)
    out = np.take(a.data, i, axis=axis)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = i
        full[tuple(sl)] = g
        return (full,)

    return _make(out, "index_axis", (a,), backward_fn)


def narrow(a, axis, start, length):
    """Slice [start, start+length) along an axis, keeping the axis."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow: window [{start}, {start + length}) outside axis of size {a.shape[axis]}"
        )
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _make(a.data[sl], "narrow", (a,), backward_fn)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, "sum", (a,), backward_fn)


def tmax(a, axis):
    """Maximum along an axis. Subgradient goes to the first (lowest-index)
    maximal entry only, so ties break deterministically."""
    a = _as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, "max", (a,), backward_fn)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    """Matrix product: 2D x 2D, batched 3D x 3D (equal batch), or 3D x 2D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch dimensions disagree for {a.shape} and {b.shape}")
    if a.ndim == 2 and b.ndim == 3:
        raise DimensionError(f"matmul: unsupported rank combination {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = np.matmul(g, bt)
        gb = np.matmul(at, g)
        if b.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return (ga, gb)

    return _make(out, "matmul", (a, b), backward_fn)


# ---------------------------------------------------------------------------
# softmax family


def softmax(x, axis=-1):
    """Max-subtraction stabilized softmax along an axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (x,), backward_fn)


def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (x,), backward_fn)


# ---------------------------------------------------------------------------
# lookups


def embedding(table, indices):
    """Row lookup: table [V, E] indexed by an integer array.

    Backward scatters gradients into the looked-up rows only.
    """
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if idx.ndim + 1 > MAX_RANK:
        raise DimensionError(f"embedding: index rank {idx.ndim} too high")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = tuple(int(i) for i in np.argwhere((idx < 0) | (idx >= vocab))[0])
        raise VocabularyError(
            f"index {int(idx[bad])} out of range [0, {vocab}) at position {bad}"
        )

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[idx], "embedding", (table,), backward_fn)


def take_along_last(x, indices):
    """Pick one entry per row along the last axis: out[..., ] = x[..., idx]."""
    x = _as_tensor(x)
    idx = np.asarray(indices)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"take_along_last: index shape {idx.shape} != {x.shape[:-1]}")
    expanded = np.expand_dims(idx, -1)
    out = np.take_along_axis(x.data, expanded, axis=-1).squeeze(-1)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, expanded, np.expand_dims(g, -1), axis=-1)
        return (full,)

    return _make(out, "take_along_last", (x,), backward_fn)


def dropout(x, rate, rng):
    """Inverted dropout with a caller-supplied RandomState. Identity at rate 0."""
    if rate <= 0.0:
        return x
    x = _as_tensor(x)
    mask = (rng.random_sample(x.shape) >= rate) / (1.0 - rate)
    return mul(x, mask)


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss):
    """Reverse-mode sweep from a scalar loss.

    Populates .grad on every requires_grad leaf; repeated calls without
    zeroing accumulate. Contributions from multiple consumers sum.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")

    order = []
    visited = set()
    stack_ = [loss]
    while stack_:
        t = stack_[-1]
        if id(t) in visited:
            stack_.pop()
            continue
        if t.node is not None:
            pending = [
                p for p in t.node.parents
                if id(p) not in visited and (p.requires_grad or p.node is not None)
            ]
            if pending:
                stack_.extend(pending)
                continue
        visited.add(id(t))
        order.append(t)
        stack_.pop()

    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not (p.requires_grad or p.node is not None):
                continue
            acc = grads.get(id(p))
            if acc is None:
                grads[id(p)] = pg
            else:
                grads[id(p)] = acc + pg


def check_finite(t, name):
    """Raise NumericError naming `name` if tensor data or grad is non-finite."""
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {name}")
    if t.grad is not None and not np.all(np.isfinite(t.grad)):
        raise NumericError(f"non-finite gradient in {name}")
