"""Small define-by-run reverse-mode differentiation engine.

Every operation returns a :class:`Node` holding a float64 array, the nodes
it was computed from, and a closure that pushes the output gradient back to
those inputs. The tape is rebuilt on every forward pass; :func:`backward`
sorts the reachable graph and replays the closures in reverse order.
"""
from __future__ import annotations

from itertools import count
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


_generation = count(1)


class Node:
    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_rule=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def detach(self) -> "Node":
        return Node(self.value.copy())

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def constant(value) -> Node:
    return Node(value)


def parameter(value, name=None) -> Node:
    return Node(value, requires_grad=True, name=name)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents, rule) -> Node:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Node(value)
    return Node(value, requires_grad=True, parents=parents, backward_rule=rule)


def _accumulate(node: Node, g):
    if node.requires_grad:
        node.grad += _unbroadcast(g, node.value.shape)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Node, b: Node, op: str):
    sa, sb = a.value.shape, b.value.shape
    if sa == sb or a.value.size == 1 or b.value.size == 1:
        return
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}") from None


# -- arithmetic ---------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.value.shape} by {b.value.shape}")
    out_value = a.value @ b.value

    def rule(g):
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    return _make(out_value, (a, b), rule)


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b, "add")

    def rule(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.value + b.value, (a, b), rule)


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b, "sub")

    def rule(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.value - b.value, (a, b), rule)


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b, "mul")

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g * b.value)
        if b.requires_grad:
            _accumulate(b, g * a.value)

    return _make(a.value * b.value, (a, b), rule)


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0

    def rule(g):
        a.grad += g * mask

    return _make(np.maximum(a.value, 0.0), (a,), rule)


def exp(a) -> Node:
    a = _as_node(a)
    out_value = np.exp(a.value)

    def rule(g):
        a.grad += g * out_value

    return _make(out_value, (a,), rule)


def log(a) -> Node:
    a = _as_node(a)
    if np.any(a.value <= 0):
        raise DomainError(f"log: non-positive input (min {a.value.min()!r})")

    def rule(g):
        a.grad += g / a.value

    return _make(np.log(a.value), (a,), rule)


def clamp(a, lo, hi) -> Node:
    # subgradient 0 on the boundaries themselves
    a = _as_node(a)
    inside = (a.value > lo) & (a.value < hi)

    def rule(g):
        a.grad += g * inside

    return _make(np.clip(a.value, lo, hi), (a,), rule)


def elementwise(kind: str, *inputs, lo=None, hi=None) -> Node:
    """Dispatch by name; ``kind`` is one of add, sub, mul, relu, exp, log, clamp."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"relu": relu, "exp": exp, "log": log}
    if kind in binary:
        return binary[kind](*inputs)
    if kind in unary:
        return unary[kind](*inputs)
    if kind == "clamp":
        return clamp(inputs[0], lo, hi)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- reductions and reshaping -------------------------------------------------

def sum(a, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    a = _as_node(a)
    out_value = a.value.sum(axis=axis)

    def rule(g):
        if axis is None:
            a.grad += np.broadcast_to(g, a.value.shape)
        else:
            a.grad += np.broadcast_to(np.expand_dims(g, axis), a.value.shape)

    return _make(out_value, (a,), rule)


def mean(a, axis=None) -> Node:
    a = _as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Node:
    a = _as_node(a)

    def rule(g):
        a.grad += g.reshape(a.value.shape)

    return _make(a.value.reshape(shape), (a,), rule)


def take(a, index) -> Node:
    """Basic or fancy indexing; repeated indices accumulate on the way back."""
    a = _as_node(a)

    def rule(g):
        np.add.at(a.grad, index, g)

    return _make(a.value[index], (a,), rule)


def concat_rows(nodes: Sequence[Node]) -> Node:
    nodes = [_as_node(n) for n in nodes]
    bounds = np.cumsum([0] + [n.value.shape[0] for n in nodes])

    def rule(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            if n.requires_grad:
                n.grad += g[lo:hi]

    return _make(np.concatenate([n.value for n in nodes], axis=0), tuple(nodes), rule)


# -- row-wise probability ops -------------------------------------------------

def softmax_rows(z) -> Node:
    z = _as_node(z)
    if z.value.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {z.value.shape}")
    shifted = z.value - z.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        z.grad += p * (g - (g * p).sum(axis=1, keepdims=True))

    return _make(p, (z,), rule)


def log_softmax_rows(z) -> Node:
    z = _as_node(z)
    if z.value.ndim != 2:
        raise DimensionError(f"log_softmax_rows expects a matrix, got shape {z.value.shape}")
    shifted = z.value - z.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_value = shifted - lse

    def rule(g):
        p = np.exp(out_value)
        z.grad += g - p * g.sum(axis=1, keepdims=True)

    return _make(out_value, (z,), rule)


# -- backward -----------------------------------------------------------------

class Graph:
    """Topologically ordered record of the nodes one backward pass visited."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes
        self.generation = next(_generation)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
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


def backward(root: Node) -> Graph:
    """Populate ``grad`` on every differentiable node reachable from ``root``.

    Interior nodes are reset before propagation; leaves accumulate, so
    parameters must be zeroed between optimizer steps.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topo_order(root)
    for node in order:
        if not node.is_leaf:
            node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_rule is not None:
            node.backward_rule(node.grad)
    return Graph(order)


def zero_grad(params: Sequence[Node]):
    for p in params:
        p.zero_grad()


def finite_diff_check(
    f: Callable[[Sequence[Node]], Node],
    params: Sequence[Node],
    h: float = 1e-5,
) -> float:
    """Largest relative gap between reverse-mode and central-difference gradients.

    ``f`` rebuilds the scalar loss from ``params``. Each coordinate of each
    parameter is perturbed in place by +-h and restored afterwards. The gap
    for one coordinate is ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    zero_grad(params)
    root = f(params)
    if not np.isfinite(root.value).all():
        raise EvaluationError("loss is not finite at the base point")
    backward(root)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = f(params).item()
            flat[k] = orig - h
            down = f(params).item()
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise EvaluationError(f"non-finite loss while probing {p!r}[{k}]")
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, abs(gflat[k] - numeric) / (abs(numeric) + 1e-8))
    return worst
