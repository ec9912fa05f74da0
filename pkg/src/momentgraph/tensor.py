"""Dense tensors with reverse-mode differentiation.

Every op accepts arbitrary leading batch dimensions and broadcasts them the
way numpy does; gradients flowing back into a broadcast operand are summed
over the broadcast axes.  Values are never modified in place by ops, so a
finished forward graph can be read from several threads.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericError

COSINE_EPS = 1e-8

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Build no backward records inside the block (evaluation mode)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A value array plus what is needed to differentiate through it.

    Leaves created by the user carry ``requires_grad``; results of ops keep
    their parents and a backward closure (the op record) only when at least
    one parent needs a gradient and recording is enabled.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, values, requires_grad=False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.parents = ()
        self._backward = None

    @classmethod
    def from_op(cls, values, parents, backward, op):
        """Wrap an op result.

        ``backward(g)`` must return one gradient (or None) per parent, each
        already shaped like that parent.
        """
        out = cls(values)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self):
        return not self.parents

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.values)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        names = " vs ".join(str(tuple(s)) for s in shapes)
        raise DimensionError(f"shapes are not broadcast-compatible: {names}") from None


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor.from_op(a.values + b.values, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor.from_op(a.values - b.values, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return unbroadcast(g * b.values, a.shape), unbroadcast(g * a.values, b.shape)

    return Tensor.from_op(a.values * b.values, (a, b), bw, "mul")


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return Tensor.from_op(x.values * c, (x,), lambda g: (g * c,), "scale")


def relu(x):
    x = as_tensor(x)
    mask = x.values > 0
    # np.maximum keeps NaN visible instead of clamping it to 0
    return Tensor.from_op(np.maximum(x.values, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.values)
    return Tensor.from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x):
    x = as_tensor(x)
    v = x.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.values)
    return Tensor.from_op(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    x = as_tensor(x)
    return Tensor.from_op(np.log(x.values), (x,), lambda g: (g / x.values,), "log")


# ---------------------------------------------------------------------------
# shape manipulation


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        same = t.ndim == ndim and all(
            t.shape[i] == tensors[0].shape[i] for i in range(ndim) if i != ax
        )
        if not same:
            shapes = ", ".join(str(u.shape) for u in tensors)
            raise DimensionError(f"concat along axis {axis} got incompatible shapes {shapes}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return Tensor.from_op(
        np.concatenate([t.values for t in tensors], axis=ax), tensors, bw, "concat"
    )


def concat_lastdim(*tensors):
    return concat(tensors, axis=-1)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor.from_op(np.stack([t.values for t in tensors], axis=axis), tensors, bw, "stack")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return Tensor.from_op(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def swap_last(x):
    """Transpose the two trailing axes."""
    x = as_tensor(x)
    return Tensor.from_op(
        np.swapaxes(x.values, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last"
    )


def broadcast_to(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    _broadcast_shape(x.shape, shape)
    old = x.shape
    return Tensor.from_op(
        np.broadcast_to(x.values, shape).copy(), (x,), lambda g: (unbroadcast(g, old),), "broadcast"
    )


def take(x, index):
    """``x[index]`` with numpy indexing semantics; repeated indices accumulate."""
    x = as_tensor(x)

    def bw(g):
        out = np.zeros_like(x.values)
        np.add.at(out, index, g)
        return (out,)

    return Tensor.from_op(np.array(x.values[index]), (x,), bw, "take")


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(x.values.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(x, axis=-1):
    x = as_tensor(x)
    m = np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(x.values - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=axis)
    w = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * w,)

    return Tensor.from_op(out, (x,), bw, "logsumexp")


# ---------------------------------------------------------------------------
# linear algebra and attention primitives


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim == 2:
        # one big GEMM instead of a loop over the leading dims
        k = a.shape[-1]
        out = (a.values.reshape(-1, k) @ b.values).reshape(a.shape[:-1] + (b.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.values.T).reshape(a.shape)
            gb = a.values.reshape(-1, k).T @ g2
            return ga, gb

        return Tensor.from_op(out, (a, b), bw, "matmul")

    _broadcast_shape(a.shape[:-2], b.shape[:-2])

    def bw(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return Tensor.from_op(a.values @ b.values, (a, b), bw, "matmul")


def softmax(x, axis=-1):
    x = as_tensor(x)
    if np.isnan(x.values).any():
        raise NumericError("softmax input contains NaN")
    m = np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(x.values - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), bw, "softmax")


def row_softmax(s, axis="rows"):
    """Normalize each row (``"rows"``) or each column (``"cols"``) of the trailing matrix."""
    if axis == "rows":
        return softmax(s, axis=-1)
    if axis == "cols":
        return softmax(s, axis=-2)
    raise ContractError(f"axis must be 'rows' or 'cols', not {axis!r}")


def _safe_unit(x, norm):
    n = norm[..., None]
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def cosine_matrix(v, w, eps=COSINE_EPS):
    """Pairwise cosine between rows: ``(..., N, d) x (..., Q, d) -> (..., N, Q)``.

    The product of norms is floored at ``eps``; below the floor the
    denominator is a constant, so zero rows get cosine 0 and finite gradients.
    """
    v, w = as_tensor(v), as_tensor(w)
    if v.ndim < 2 or w.ndim < 2 or v.shape[-1] != w.shape[-1]:
        raise DimensionError(f"cosine_matrix feature dims differ: {v.shape} vs {w.shape}")
    _broadcast_shape(v.shape[:-2], w.shape[:-2])
    vv, wv = v.values, w.values
    nv = np.sqrt((vv * vv).sum(-1))
    nw = np.sqrt((wv * wv).sum(-1))
    dots = vv @ np.swapaxes(wv, -1, -2)
    prod = nv[..., :, None] * nw[..., None, :]
    den = np.maximum(prod, eps)
    out = dots / den

    def bw(g):
        gd = g / den
        k = np.where(prod > eps, g * dots / (den * den), 0.0)
        gv = gd @ wv - _safe_unit(vv, nv) * (k * nw[..., None, :]).sum(-1)[..., None]
        gw = np.swapaxes(gd, -1, -2) @ vv - _safe_unit(wv, nw) * (
            k * nv[..., :, None]
        ).sum(-2)[..., None]
        return unbroadcast(gv, v.shape), unbroadcast(gw, w.shape)

    return Tensor.from_op(out, (v, w), bw, "cosine_matrix")


def cosine_rows(a, b, eps=COSINE_EPS):
    """Cosine between matching rows: ``(..., N, d) x (..., N, d) -> (..., N)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_rows feature dims differ: {a.shape} vs {b.shape}")
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.values, b.values
    na = np.sqrt((av * av).sum(-1))
    nb = np.sqrt((bv * bv).sum(-1))
    dots = (av * bv).sum(-1)
    prod = na * nb
    den = np.maximum(prod, eps)
    out = dots / den

    def bw(g):
        gd = (g / den)[..., None]
        k = np.where(prod > eps, g * dots / (den * den), 0.0)[..., None]
        ga = gd * bv - k * nb[..., None] * _safe_unit(av, na)
        gb = gd * av - k * na[..., None] * _safe_unit(bv, nb)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return Tensor.from_op(out, (a, b), bw, "cosine_rows")


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "concat_lastdim": concat_lastdim,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "scale": scale,
}


def elementwise(op, *args):
    """Dispatch by name, e.g. ``elementwise("relu", x)`` or ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)
