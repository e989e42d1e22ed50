"""Small reverse-mode automatic differentiation on top of numpy.

Values are float64 arrays of rank 0-3. Each op records its parents and a
backward rule; ``backward`` walks the graph in reverse topological order.
Broadcasting is one-directional only: one operand must already have the
result shape (row vectors, column vectors and scalars stretch onto it).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12

_grad_enabled = True


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (inference, finite differences)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "consumed")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn=None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.consumed = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self):
        return not self.parents

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    __array_priority__ = 100

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _finite(value: np.ndarray, op: str) -> np.ndarray:
    ok = math.isfinite(value) if value.ndim == 0 else np.isfinite(value).all()
    if not ok:
        raise NonFiniteError(f"non-finite value produced by {op}")
    return value


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x)


def constant(x) -> Node:
    return Node(_finite(np.array(x, dtype=np.float64), "constant"))


def parameter(x) -> Node:
    return Node(_finite(np.array(x, dtype=np.float64), "parameter"), requires_grad=True)


def _make(value, parents, backward_fn, op) -> Node:
    value = _finite(np.asarray(value, dtype=np.float64), op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, True, op)
    return Node(value, op=op)


def _check_broadcast(a: tuple, b: tuple, op: str) -> tuple:
    out = np.broadcast_shapes(a, b) if a != b else a
    if out != a and out != b:
        raise ValueError(f"{op}: shapes {a} and {b} need two-way broadcasting")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise ---------------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def exp(x) -> Node:
    x = as_node(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x, eps: float = LOG_EPS) -> Node:
    """Natural log of max(x, eps); the gradient is zero where the clamp is active."""
    x = as_node(x)
    xv = x.value
    live = xv > eps
    safe = np.where(live, xv, eps)
    return _make(np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),), "log")


def tanh(x) -> Node:
    x = as_node(x)
    out = np.tanh(x.value)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Node:
    x = as_node(x)
    xv = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xv))
    out = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x) -> Node:
    x = as_node(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


# shape ops -----------------------------------------------------------------

def matmul(a, b) -> Node:
    """(m,k)@(k,n), (B,m,k)@(k,n) or (B,m,k)@(B,k,n)."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim not in (2, 3) or bv.ndim not in (2, 3) or (av.ndim == 2 and bv.ndim == 3):
        raise ValueError(f"matmul: unsupported ranks {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2] or (bv.ndim == 3 and av.shape[0] != bv.shape[0]):
        raise ValueError(f"matmul: shape mismatch {av.shape} @ {bv.shape}")

    def backward_fn(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim == 3:
            k, n = bv.shape
            gb = av.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    with np.errstate(over="ignore", invalid="ignore"):
        out = av @ bv  # overflow is reported by the finite check in _make
    return _make(out, (a, b), backward_fn, "matmul")


def transpose(x) -> Node:
    """Swap the last two axes."""
    x = as_node(x)
    return _make(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x, shape) -> Node:
    x = as_node(x)
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    values = [n.value for n in nodes]
    ax = axis % values[0].ndim
    bounds = np.cumsum([v.shape[ax] for v in values])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate(values, axis=ax), nodes, backward_fn, "concat")


def slice_(x, index) -> Node:
    x = as_node(x)
    shape = x.shape

    def backward_fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.value[index], (x,), backward_fn, "slice")


def sum_(x, axis=None, keepdims: bool = False) -> Node:
    x = as_node(x)
    shape = x.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.value.sum(axis=axis, keepdims=keepdims), (x,), backward_fn, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = as_node(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def softmax(x, axis: int = -1) -> Node:
    x = as_node(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward_fn, "softmax")


def softmax_rows(x) -> Node:
    return softmax(x, axis=-1)


# graph traversal -----------------------------------------------------------

def _topo(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
    if root.value.size != 1 or root.value.ndim > 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("root does not depend on any parameter")
    order = _topo(root)
    if any(n.consumed for n in order if not n.is_leaf):
        raise GraphError("graph already backpropagated; call reset_graph() first")
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        node.consumed = True
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def reset_graph(root: Node) -> None:
    """Clear gradients and consumed flags so the graph can be backpropagated again."""
    for node in _topo(root):
        node.grad = None
        node.consumed = False


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


# gradient verification -----------------------------------------------------

def numeric_gradient(f: Callable[[Node], Node], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(constant(x)).item()
            flat[i] = orig - h
            fm = f(constant(x)).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_gradient(f: Callable[[Node], Node], x: np.ndarray) -> np.ndarray:
    leaf = parameter(x)
    out = f(leaf)
    if not out.requires_grad:
        return np.zeros_like(leaf.value)
    backward(out)
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(f: Callable[[Node], Node], x, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max per-coordinate relative error between backward() and central differences."""
    x = np.array(x, dtype=np.float64)
    return relative_error(analytic_gradient(f, x), numeric_gradient(f, x, h), floor)
