"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Deliberately small: 1-D/2-D float arrays, broadcasting only for the
row/column-vector cases the models need, deterministic evaluation order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Node:
    """A value in the computation graph.

    `value` is the forward result, `grad` accumulates the partial derivative
    of the scalar root with respect to this node (same shape as `value`).
    Leaf nodes (parameters, constants) have no parents.
    """

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"

    # operator sugar; constants are wrapped automatically
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

    def __getitem__(self, key):
        return getitem(self, key)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def param(value) -> Node:
    """A trainable leaf."""
    return Node(np.array(value, dtype=np.float64))


def const(value) -> Node:
    """A non-trainable leaf (gradients are computed but never applied)."""
    return Node(value)


def _accumulate(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # ancestors before descendants


def backward(root: Node) -> None:
    """Backpropagate from a scalar root, accumulating grads on every ancestor.

    Grads of reachable nodes are reset first, so separate calls do not mix;
    within one call a node used several times accumulates additively.
    """
    if root.value.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.value.shape}")
    order = _topo(root)
    for n in order:
        n.grad = None
    root.grad = np.ones_like(root.value)
    for n in reversed(order):
        if n._backward is not None and n.grad is not None:
            n._backward(n.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = a.value + b.value

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return Node(value, (a, b), bwd)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = a.value - b.value

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    return Node(value, (a, b), bwd)


def neg(a) -> Node:
    a = as_node(a)

    def bwd(g):
        _accumulate(a, -g)

    return Node(-a.value, (a,), bwd)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = a.value * b.value

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return Node(value, (a, b), bwd)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = a.value / b.value

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.value, a.value.shape))
        _accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return Node(value, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul: operands must be 2-D, got {a.value.shape} and {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.value.shape} and {b.value.shape}")
    value = a.value @ b.value

    def bwd(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return Node(value, (a, b), bwd)


def transpose(a) -> Node:
    a = as_node(a)

    def bwd(g):
        _accumulate(a, g.T)

    return Node(a.value.T, (a,), bwd)


def inv(a) -> Node:
    """Matrix inverse; backward is -inv^T g inv^T."""
    a = as_node(a)
    value = np.linalg.inv(a.value)

    def bwd(g):
        _accumulate(a, -value.T @ g @ value.T)

    return Node(value, (a,), bwd)


def logdet(a) -> Node:
    """Log determinant of a matrix with positive determinant."""
    a = as_node(a)
    sign, value = np.linalg.slogdet(a.value)
    if sign <= 0:
        raise ValueError("logdet: matrix determinant is not positive")
    a_inv_t = np.linalg.inv(a.value).T

    def bwd(g):
        _accumulate(a, g * a_inv_t)

    return Node(value, (a,), bwd)


def diagonal(a) -> Node:
    """Diagonal of a square matrix as a 1-D node."""
    a = as_node(a)
    n, m = a.value.shape
    if n != m:
        raise ValueError(f"diagonal: matrix must be square, got {a.value.shape}")

    def bwd(g):
        out = np.zeros_like(a.value)
        np.fill_diagonal(out, g)
        _accumulate(a, out)

    return Node(np.diagonal(a.value).copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape

    def bwd(g):
        _accumulate(a, g.reshape(old))

    return Node(a.value.reshape(shape), (a,), bwd)


def concat(nodes, axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(n, g[tuple(idx)])

    return Node(value, tuple(nodes), bwd)


def getitem(a, key) -> Node:
    a = as_node(a)
    value = a.value[key]

    def bwd(g):
        out = np.zeros_like(a.value)
        np.add.at(out, key, g)
        _accumulate(a, out)

    return Node(np.array(value, copy=True), (a,), bwd)


def gather(a, rows, cols) -> Node:
    """Pick entries (rows[i], cols[i]) from a 2-D node as a 1-D node."""
    a = as_node(a)
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)

    def bwd(g):
        out = np.zeros_like(a.value)
        np.add.at(out, (rows, cols), g)
        _accumulate(a, out)

    return Node(a.value[rows, cols].copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.value.shape).copy())

    return Node(value, (a,), bwd)


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def l2_norm(a, axis=None, keepdims=False) -> Node:
    """Euclidean norm, composed from primitives."""
    return sqrt(sum_(square(a), axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------------------
# nonlinearities


def square(a) -> Node:
    a = as_node(a)

    def bwd(g):
        _accumulate(a, 2.0 * a.value * g)

    return Node(a.value * a.value, (a,), bwd)


def sqrt(a) -> Node:
    a = as_node(a)
    value = np.sqrt(a.value)

    def bwd(g):
        _accumulate(a, g / (2.0 * value))

    return Node(value, (a,), bwd)


def exp(a) -> Node:
    a = as_node(a)
    value = np.exp(a.value)

    def bwd(g):
        _accumulate(a, g * value)

    return Node(value, (a,), bwd)


def log(a) -> Node:
    a = as_node(a)

    def bwd(g):
        _accumulate(a, g / a.value)

    return Node(np.log(a.value), (a,), bwd)


def tanh(a) -> Node:
    a = as_node(a)
    value = np.tanh(a.value)

    def bwd(g):
        _accumulate(a, g * (1.0 - value * value))

    return Node(value, (a,), bwd)


def sigmoid(a) -> Node:
    a = as_node(a)
    x = a.value
    value = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _accumulate(a, g * value * (1.0 - value))

    return Node(value, (a,), bwd)


def softmax(a, axis=-1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * value).sum(axis=axis, keepdims=True)
        _accumulate(a, value * (g - inner))

    return Node(value, (a,), bwd)


def logsumexp(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=axis, keepdims=True)
    value = (m + np.log(s))
    weights = e / s
    if not keepdims and axis is not None:
        value = value.squeeze(axis=axis)
    elif not keepdims:
        value = value.reshape(())

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, weights.shape) * weights)

    return Node(value, (a,), bwd)


# ---------------------------------------------------------------------------
# optimization and verification


def sgd_step(params: list[Node], lr: float, clip_norm: float | None = 5.0) -> float:
    """In-place SGD update; gradients are clipped by global norm, then cleared.

    Returns the pre-clip global gradient norm.
    """
    total_sq = 0.0
    for p in params:
        if p.grad is not None:
            total_sq += float((p.grad * p.grad).sum())
    total = float(np.sqrt(total_sq))
    scale = 1.0
    if clip_norm is not None and total > clip_norm and total > 0:
        scale = clip_norm / total
    for p in params:
        if p.grad is not None:
            p.value -= lr * scale * p.grad
            p.grad = None
    return total


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: int = 0
    worst_index: tuple = ()
    per_param: list = field(default_factory=list)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(build, params: list[Node], h: float = 1e-5,
               denom_floor: float = 1e-2) -> GradCheckReport:
    """Compare analytic gradients of `build()` against central differences.

    `build` must reconstruct the scalar root from the current parameter
    values on every call. Relative error per component is
    |analytic - numeric| / max(|analytic|, |numeric|, denom_floor); the floor
    turns the comparison into an absolute one for near-zero gradients so
    finite-difference noise is not amplified.
    """
    root = build()
    backward(root)
    analytic = [np.array(p.grad, copy=True) if p.grad is not None
                else np.zeros_like(p.value) for p in params]

    report = GradCheckReport(max_rel_err=0.0)
    for pi, p in enumerate(params):
        flat = p.value.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(build().value)
            flat[i] = orig - h
            f_minus = float(build().value)
            flat[i] = orig
            num[i] = (f_plus - f_minus) / (2.0 * h)
        num = num.reshape(p.value.shape)
        ana = analytic[pi]
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), denom_floor)
        rel = np.abs(ana - num) / denom
        worst = float(rel.max()) if rel.size else 0.0
        report.per_param.append(worst)
        if worst > report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = pi
            report.worst_index = np.unravel_index(int(rel.argmax()), rel.shape)
    return report
