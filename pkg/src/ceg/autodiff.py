"""A small tape-based reverse-mode automatic differentiation engine.

Values are dense float64 numpy arrays. Operations executed inside an active
:class:`Graph` are appended to its tape; :func:`backward` walks the tape in
exact reverse creation order. Outside a graph every op is a plain forward
computation, which is what inference code paths use.

Broadcasting is deliberately limited to the explicit ``add_bias`` and
``broadcast_to`` ops and to python-scalar operands; all other elementwise
binary ops require identical shapes.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node", "Parameter", "Graph", "ShapeError", "as_node", "backward", "grad_check", "check_parameter_grads",
    "add", "sub", "mul", "neg", "scale", "add_scalar", "matmul", "affine", "add_bias",
    "concat", "cols", "take", "repeat_rows", "reshape", "broadcast_to", "segment_sum",
    "softplus", "relu", "tanh", "sigmoid", "exp", "log", "square", "clamp_min",
    "sum", "mean",
]


class ShapeError(ValueError):
    pass


_state = threading.local()


def _active() -> "Graph | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} shape={self.value.shape}>"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # operator sugar
    def __add__(self, other):
        return add_scalar(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other) if _is_scalar(other) else sub(other, self)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Node):
    """A trainable leaf; its ``value`` is updated in place by optimizers."""

    __slots__ = ()

    def __init__(self, value, name=None):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)


class Graph:
    """Define-by-run tape. Use as a context manager around a forward pass.

    ``nodes`` holds every recorded op node in creation order and
    ``parameters`` the distinct :class:`Parameter` leaves reached by them.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: list[Parameter] = []
        self._param_ids: set[int] = set()

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def _record(self, node: Node):
        self.nodes.append(node)
        for p in node.parents:
            if isinstance(p, Parameter) and id(p) not in self._param_ids:
                self._param_ids.add(id(p))
                self.parameters.append(p)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=np.float64))


def _make(value, parents, backward_fn) -> Node:
    graph = _active()
    if graph is not None and any(p.requires_grad for p in parents):
        node = Node(value, parents, backward_fn, requires_grad=True)
        graph._record(node)
        return node
    return Node(value)


def _same_shape(op, a, b):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# --------------------------------------------------------------------------- elementwise binary


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("add", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.value + b.value, (a, b), bw)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("sub", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.value - b.value, (a, b), bw)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.value)
        if b.requires_grad:
            b._accumulate(g * a.value)

    return _make(a.value * b.value, (a, b), bw)


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: a._accumulate(-g))


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: a._accumulate(g * c))


def add_scalar(a, c: float) -> Node:
    a = as_node(a)
    return _make(a.value + float(c), (a,), lambda g: a._accumulate(g))


# --------------------------------------------------------------------------- linear algebra


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.value.shape} vs {b.value.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _make(a.value @ b.value, (a, b), bw)


def add_bias(x, b) -> Node:
    """Row-wise ``x + b`` for ``x`` of shape (n, m) and ``b`` of shape (m,)."""
    x, b = as_node(x), as_node(b)
    if x.value.ndim != 2 or b.value.shape != (x.value.shape[1],):
        raise ShapeError(f"add_bias: shape mismatch {x.value.shape} vs {b.value.shape}")

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(x.value + b.value, (x, b), bw)


def affine(W, x, b) -> Node:
    """``x @ W + b`` with ``x`` (n, in), ``W`` (in, out), ``b`` (out,).

    A 1-D ``x`` is treated as a single row and a 1-D result is returned.
    """
    x = as_node(x)
    if x.value.ndim == 1:
        return reshape(add_bias(matmul(reshape(x, (1, -1)), W), b), (-1,))
    return add_bias(matmul(x, W), b)


# --------------------------------------------------------------------------- structural


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shape mismatch {[n.value.shape for n in nodes]}") from exc
    sizes = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]

    def bw(g):
        for n, piece in zip(nodes, np.split(g, sizes, axis=axis)):
            if n.requires_grad:
                n._accumulate(piece)

    return _make(value, tuple(nodes), bw)


def cols(x, start: int, stop: int) -> Node:
    """Column slice ``x[..., start:stop]``."""
    x = as_node(x)

    def bw(g):
        full = np.zeros_like(x.value)
        full[..., start:stop] = g
        x._accumulate(full)

    return _make(x.value[..., start:stop], (x,), bw)


def take(x, index) -> Node:
    """Row gather ``x[index]``; repeated indices accumulate in backward."""
    x = as_node(x)
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(x.value)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _make(x.value[index], (x,), bw)


def repeat_rows(x, times: int) -> Node:
    """Repeat each row of a 2-D ``x`` ``times`` times consecutively."""
    x = as_node(x)
    n, m = x.value.shape

    def bw(g):
        x._accumulate(g.reshape(n, times, m).sum(axis=1))

    return _make(np.repeat(x.value, times, axis=0), (x,), bw)


def reshape(x, shape) -> Node:
    x = as_node(x)
    old = x.value.shape
    return _make(x.value.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(old)))


def broadcast_to(x, shape) -> Node:
    """Explicit numpy-style broadcast; backward sums over the expanded axes."""
    x = as_node(x)
    old = x.value.shape
    try:
        value = np.broadcast_to(x.value, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: shape mismatch {old} vs {tuple(shape)}") from exc

    def bw(g):
        lead = g.ndim - len(old)
        red = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(old) if s == 1 and red.shape[i] != 1)
        x._accumulate(red.sum(axis=axes, keepdims=True) if axes else red)

    return _make(value, (x,), bw)


def segment_sum(x, segment_ids, n_segments: int) -> Node:
    """``out[k] = sum(x[i] for i with segment_ids[i] == k)`` for 1-D ``x``."""
    x = as_node(x)
    ids = np.asarray(segment_ids, dtype=np.intp)
    if x.value.shape != ids.shape:
        raise ShapeError(f"segment_sum: shape mismatch {x.value.shape} vs {ids.shape}")
    value = np.bincount(ids, weights=x.value, minlength=n_segments)
    return _make(value, (x,), lambda g: x._accumulate(g[ids]))


# --------------------------------------------------------------------------- elementwise unary


def softplus(x) -> Node:
    x = as_node(x)
    v = x.value
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def bw(g):
        x._accumulate(g * _sigmoid(v))

    return _make(out, (x,), bw)


def relu(x) -> Node:
    x = as_node(x)
    mask = x.value > 0
    return _make(np.maximum(x.value, 0.0), (x,), lambda g: x._accumulate(g * mask))


def clamp_min(x, floor: float) -> Node:
    """``max(x, floor)``; gradient is zero wherever the floor is active."""
    x = as_node(x)
    mask = x.value > floor
    # np.maximum keeps NaN so divergence is not hidden by the floor
    return _make(np.maximum(x.value, floor), (x,), lambda g: x._accumulate(g * mask))


def tanh(x) -> Node:
    x = as_node(x)
    out = np.tanh(x.value)
    return _make(out, (x,), lambda g: x._accumulate(g * (1.0 - out * out)))


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Node:
    x = as_node(x)
    out = _sigmoid(x.value)
    return _make(out, (x,), lambda g: x._accumulate(g * out * (1.0 - out)))


def exp(x) -> Node:
    x = as_node(x)
    out = np.exp(x.value)
    return _make(out, (x,), lambda g: x._accumulate(g * out))


def log(x) -> Node:
    x = as_node(x)
    v = x.value
    return _make(np.log(v), (x,), lambda g: x._accumulate(g / v))


def square(x) -> Node:
    x = as_node(x)
    v = x.value
    return _make(v * v, (x,), lambda g: x._accumulate(2.0 * g * v))


# --------------------------------------------------------------------------- reductions


def sum(x, axis=None) -> Node:  # noqa: A001 - mirrors numpy
    x = as_node(x)
    shape = x.value.shape

    def bw(g):
        if axis is None:
            x._accumulate(np.full(shape, float(g)))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), shape))

    return _make(np.asarray(x.value.sum(axis=axis)), (x,), bw)


def mean(x, axis=None) -> Node:
    x = as_node(x)
    n = x.value.size if axis is None else x.value.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


# --------------------------------------------------------------------------- driver


def backward(graph: Graph, loss: Node) -> list[np.ndarray]:
    """Back-propagate from scalar ``loss``; return grads aligned with ``graph.parameters``.

    Gradients of all parameters reached by the tape are reset first, so
    parameters shared between graphs never leak accumulated values.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    for p in graph.parameters:
        p.grad = None
    for n in graph.nodes:
        n.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.value)
        for node in reversed(graph.nodes):
            if node.grad is not None:
                node.backward_fn(node.grad)
    return [np.zeros_like(p.value) if p.grad is None else p.grad for p in graph.parameters]


def _rel_err(a, fd, floor, scale_floor):
    # coordinates far below the gradient's scale are judged against that scale,
    # since central differences cannot resolve them below their roundoff
    a, fd = np.asarray(a, float), np.asarray(fd, float)
    denom = np.maximum(np.maximum(np.abs(fd), floor), scale_floor * np.max(np.abs(fd), initial=0.0))
    return float(np.max(np.abs(a - fd) / denom, initial=0.0))


def grad_check(f: Callable[[Node], Node], x, eps: float = 1e-5, scale_floor: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a parameter node holding ``x`` to a scalar node. The error
    per coordinate is ``|ad - fd| / max(|fd|, 1e-8, scale_floor * max|fd|)``.
    """
    x = np.array(x, dtype=np.float64)
    p = Parameter(x.copy())
    with Graph() as g:
        out = f(p)
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("grad_check: non-finite function value")
    ad = backward(g, out)[0] if p in g.parameters else np.zeros_like(x)
    fd = np.zeros_like(x)
    flat = p.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(p).value)
        flat[i] = orig - eps
        down = float(f(p).value)
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise FloatingPointError(f"grad_check: non-finite function value at coordinate {i}")
        fd.reshape(-1)[i] = (up - down) / (2 * eps)
    return _rel_err(ad, fd, 1e-8, scale_floor)


def check_parameter_grads(loss_fn: Callable[[], Node], params: Sequence[Parameter], coords: int | None = None,
                          eps: float = 1e-5, rng=None, floor: float = 1e-8, scale_floor: float = 1e-6) -> float:
    """Max relative error of ``backward`` against central differences over ``params``.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values
    and must be deterministic. With ``coords`` set, that many coordinates
    are drawn at random (without replacement) from all parameter entries.
    """
    with Graph() as g:
        loss = loss_fn()
    grads = backward(g, loss)
    by_id = {id(p): gr for p, gr in zip(g.parameters, grads)}
    flat = [(p, i) for p in params for i in range(p.value.size)]
    if coords is not None and coords < len(flat):
        rng = np.random.default_rng(rng)
        flat = [flat[j] for j in np.sort(rng.choice(len(flat), coords, replace=False))]
    ads, fds = [], []
    for p, i in flat:
        view = p.value.reshape(-1)
        orig = view[i]
        view[i] = orig + eps
        up = float(loss_fn().value)
        view[i] = orig - eps
        down = float(loss_fn().value)
        view[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise FloatingPointError(f"check_parameter_grads: non-finite loss perturbing {p.name}[{i}]")
        fd = (up - down) / (2 * eps)
        ads.append(by_id[id(p)].reshape(-1)[i] if id(p) in by_id else 0.0)
        fds.append(fd)
    return _rel_err(ads, fds, floor, scale_floor)
