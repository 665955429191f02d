"""Minimal reverse-mode differentiation over numpy arrays.

Each operation returns a :class:`Node` holding its value, its parents and a
closure that maps the upstream gradient to parent gradients. ``backward``
walks the graph in reverse topological order and accumulates gradients;
leaves created with :func:`param` write into a ParamStore's gradient buffers.
"""
from __future__ import annotations

import contextlib

import numpy as np

_DEBUG = False
# test hook: per-primitive multiplier on the backward pass (1.0 = exact)
GRAD_CORRUPTION: dict[str, float] = {}


# when a list, relu appends the smallest |input| it sees (gradient checks avoid kinks)
_KINKS: list | None = None


class NumericalError(FloatingPointError):
    pass


@contextlib.contextmanager
def track_kinks():
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    global _DEBUG
    prev, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = prev


def debug_enabled() -> bool:
    return _DEBUG


class Node:
    __slots__ = ("value", "parents", "backward_fn", "op", "grad", "param_name", "store")

    def __init__(self, value, parents=(), backward_fn=None, op="const"):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.grad = None
        self.param_name = None
        self.store = None
        if _DEBUG and not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite value produced by '{op}'")

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"


def const(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=dtype))


def param(store, name: str) -> Node:
    """Leaf bound to ``store[name]``; backward adds into ``store.grads[name]``."""
    node = Node(store[name], op="param")
    node.param_name = name
    node.store = store
    return node


def _op(value, parents, backward_fn, op):
    scale_ = GRAD_CORRUPTION.get(op)
    if scale_ is not None:
        inner = backward_fn

        def backward_fn(g):
            return [None if d is None else d * scale_ for d in inner(g)]
    return Node(value, tuple(parents), backward_fn, op)


def scatter_add(idx: np.ndarray, x: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[k]] += x[k]`` into ``n`` rows; fixed summation order (by k) per row."""
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    if not len(idx):
        return out
    if x.ndim == 1:
        return np.bincount(idx, weights=x, minlength=n).astype(x.dtype)
    perm = np.argsort(idx, kind="stable")
    sidx = idx[perm]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] = np.add.reduceat(x[perm], starts, axis=0)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# --------------------------------------------------------------------------- primitives

def add(a, b) -> Node:
    a, b = const(a), const(b)
    return _op(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    return _op(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Node:
    """Element-wise product with numpy broadcasting."""
    a, b = const(a), const(b)
    return _op(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def scale(a, c: float) -> Node:
    a = const(a)
    return _op(a.value * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Node:
    """Matrix (or matrix-vector) product ``a @ b`` for 1-D/2-D operands."""
    a, b = const(a), const(b)
    av, bv = a.value, b.value

    def backward(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _op(av @ bv, (a, b), backward, "matmul")


def transpose(a) -> Node:
    a = const(a)
    return _op(a.value.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Node:
    a = const(a)
    old = a.shape
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def relu(a) -> Node:
    a = const(a)
    mask = a.value > 0
    if _KINKS is not None and a.value.size:
        _KINKS.append(float(np.min(np.abs(a.value))))
    return _op(np.maximum(a.value, 0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Node:
    a = const(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a) -> Node:
    a = const(a)
    out = np.exp(a.value)
    return _op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = const(a)
    x = a.value
    return _op(np.log(x), (a,), lambda g: (g / x,), "log")


def log_sigmoid(a) -> Node:
    """``ln sigma(x)`` computed as ``-softplus(-x)``; stable for large |x|."""
    a = const(a)
    x = a.value
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    sig_neg = np.exp(out - x)  # sigma(-x) = sigma(x) * e^{-x}
    return _op(out, (a,), lambda g: (g * sig_neg,), "log_sigmoid")


def sum_(a, axis=None) -> Node:
    a = const(a)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _op(np.sum(a.value, axis=axis), (a,), backward, "sum")


def mean(a) -> Node:
    a = const(a)
    return scale(sum_(a), 1.0 / max(a.value.size, 1))


def concat(nodes, axis: int = -1) -> Node:
    nodes = [const(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return _op(np.concatenate([n.value for n in nodes], axis=axis), nodes,
               lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take_rows(a, idx) -> Node:
    """Gather ``a[idx]`` along axis 0; backward scatters with accumulation."""
    a = const(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def backward(g):
        if idx.ndim != 1:
            out = np.zeros(shape, dtype=g.dtype)
            np.add.at(out, idx, g)
            return (out,)
        return (scatter_add(idx, g, shape[0]),)

    return _op(a.value[idx], (a,), backward, "take_rows")


def getitem(a, key) -> Node:
    """Basic indexing ``a[key]`` (ints and slices); backward pads with zeros."""
    a = const(a)
    shape, dtype = a.shape, a.value.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        out[key] = g
        return (out,)

    return _op(a.value[key], (a,), backward, "getitem")


def softmax(a, axis: int = -1) -> Node:
    """Standard softmax with max subtraction."""
    a = const(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _op(out, (a,), backward, "softmax")


def segment_sum(a, seg, n_seg: int) -> Node:
    """Sum rows of ``a`` into ``n_seg`` buckets given by ``seg`` (fixed row order)."""
    a = const(a)
    seg = np.asarray(seg, dtype=np.int64)
    out = scatter_add(seg, a.value, n_seg)
    return _op(out, (a,), lambda g: (g[seg],), "segment_sum")


def segment_logsumexp(x: np.ndarray, seg: np.ndarray, n_seg: int) -> np.ndarray:
    mx = np.zeros(n_seg, dtype=x.dtype)
    if len(seg):
        perm = np.argsort(seg, kind="stable")
        sseg = seg[perm]
        starts = np.flatnonzero(np.r_[True, sseg[1:] != sseg[:-1]])
        mx[sseg[starts]] = np.maximum.reduceat(x[perm], starts)
    tot = scatter_add(seg, np.exp(x - mx[seg]), n_seg)
    with np.errstate(divide="ignore"):
        return mx + np.log(tot)


def smoothed_softmax(scores, seg, n_seg: int, rho: float) -> Node:
    """Per-segment ``exp(b_k) / (sum_seg exp(b))**rho`` in the log domain.

    With ``rho == 1`` this is the standard segment softmax.
    """
    b = const(scores)
    seg = np.asarray(seg, dtype=np.int64)
    x = b.value
    lse = segment_logsumexp(x, seg, n_seg)
    out = np.exp(x - rho * lse[seg])
    p = np.exp(x - lse[seg])

    def backward(g):
        gb = g * out
        tot = scatter_add(seg, gb, n_seg)
        return (gb - rho * p * tot[seg],)

    return _op(out, (b,), backward, "smoothed_softmax")


# --------------------------------------------------------------------------- backward

def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable parameter's gradient buffer."""
    if np.ndim(loss.value) != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Node] = []
    seen: set[int] = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node.param_name is not None:
            node.store.grads[node.param_name] += g.astype(node.store.grads[node.param_name].dtype,
                                                           copy=False)
            continue
        if node.backward_fn is None:
            continue
        if _DEBUG and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient flowing into '{node.op}'")
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or (parent.backward_fn is None and parent.param_name is None):
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
