"""Dense 2-D tensor ops with reverse-mode gradients, a parameter store and Adam.

Every value is a float64 matrix (rows = patients, columns = features). Each op
returns a :class:`Node` that remembers how to push its output gradient back to
its inputs, which is all the fusion networks in this package need.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

DenseMatrix = np.ndarray


class ShapeError(ValueError):
    """Raised when an op receives shape-incompatible inputs."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class NonFiniteError(FloatingPointError):
    pass


def as_matrix(x, name: str = "value") -> DenseMatrix:
    """Coerce ``x`` to a finite 2-D float64 array (1-D becomes a column)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError(name, arr.shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


class Node:
    """A matrix in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, parents: Sequence["Node"] = (), backward=None,
                 requires_grad: bool | None = None, name: str | None = None):
        self.value = value
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} shape={self.value.shape}>"

    # operator sugar keeps the head definitions readable
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

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x, name: str | None = None) -> Node:
    return Node(as_matrix(x, name or "constant"), requires_grad=False, name=name)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _accumulate(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def backward(loss: Node) -> None:
    """Propagate d(loss)/d(.) into every upstream node that requires grad."""
    if loss.value.size != 1:
        raise ShapeError("backward", loss.shape)
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    _accumulate(loss, np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- forward ops

def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = Node(a.value @ b.value, (a, b))

    def _back(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    out._backward = _back
    return out


def affine(x, weight, bias) -> Node:
    """``x @ W + b`` with ``W`` of shape (in, out) and ``b`` of shape (1, out)."""
    x, weight, bias = _lift(x), _lift(weight), _lift(bias)
    if x.shape[1] != weight.shape[0] or bias.shape != (1, weight.shape[1]):
        raise ShapeError("affine", x.shape, weight.shape, bias.shape)
    out = Node(x.value @ weight.value + bias.value, (x, weight, bias))

    def _back(g):
        _accumulate(x, g @ weight.value.T)
        _accumulate(weight, x.value.T @ g)
        _accumulate(bias, g.sum(axis=0, keepdims=True))

    out._backward = _back
    return out


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)
    out = Node(a.value + b.value, (a, b))

    def _back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out._backward = _back
    return out


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a, b)
    out = Node(a.value - b.value, (a, b))

    def _back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    out._backward = _back
    return out


def mul(a, b) -> Node:
    """Element-wise product with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)
    out = Node(a.value * b.value, (a, b))

    def _back(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    out._backward = _back
    return out


def scale(a, c: float) -> Node:
    a = _lift(a)
    out = Node(a.value * c, (a,))
    out._backward = lambda g: _accumulate(a, g * c)
    return out


def relu(a) -> Node:
    a = _lift(a)
    mask = a.value > 0
    out = Node(np.where(mask, a.value, 0.0), (a,))
    out._backward = lambda g: _accumulate(a, g * mask)
    return out


def sigmoid(a) -> Node:
    a = _lift(a)
    # split by sign so exp never overflows
    x = a.value
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Node(s, (a,))
    out._backward = lambda g: _accumulate(a, g * s * (1.0 - s))
    return out


def softmax_rows(a) -> Node:
    a = _lift(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Node(s, (a,))

    def _back(g):
        _accumulate(a, s * (g - (g * s).sum(axis=1, keepdims=True)))

    out._backward = _back
    return out


def concat(parts: Sequence) -> Node:
    """Concatenate along the feature axis."""
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError("concat", *(p.shape for p in parts))
    out = Node(np.concatenate([p.value for p in parts], axis=1), parts)
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def _back(g):
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            _accumulate(p, g[:, lo:hi])

    out._backward = _back
    return out


def slice_cols(a, start: int, stop: int) -> Node:
    a = _lift(a)
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError("slice_cols", a.shape, (start, stop))
    out = Node(a.value[:, start:stop].copy(), (a,))

    def _back(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        _accumulate(a, full)

    out._backward = _back
    return out


def sum_cols(a) -> Node:
    """Row sums, returned as a column."""
    a = _lift(a)
    out = Node(a.value.sum(axis=1, keepdims=True), (a,))
    out._backward = lambda g: _accumulate(a, np.broadcast_to(g, a.shape))
    return out


def mean_rows(a) -> Node:
    """Column means, returned as a single row."""
    a = _lift(a)
    n = a.shape[0]
    out = Node(a.value.mean(axis=0, keepdims=True), (a,))
    out._backward = lambda g: _accumulate(a, np.broadcast_to(g / n, a.shape))
    return out


def dropout(a, rate: float, seed: int, train: bool = True) -> Node:
    """Inverted dropout: scaled by ``1/(1-rate)`` in training, identity otherwise."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    a = _lift(a)
    if not train or rate == 0.0:
        return a
    keep = np.random.default_rng(seed).random(a.shape) >= rate
    factor = keep / (1.0 - rate)
    out = Node(a.value * factor, (a,))
    out._backward = lambda g: _accumulate(a, g * factor)
    return out


def attach_loss(a, value: float, grad) -> Node:
    """Scalar node with a precomputed value and gradient with respect to ``a``."""
    a = _lift(a)
    grad = np.asarray(grad, dtype=np.float64).reshape(a.shape)
    out = Node(np.array([[value]], dtype=np.float64), (a,))
    out._backward = lambda g: _accumulate(a, g[0, 0] * grad)
    return out


# --------------------------------------------------------------- parameters

class ParamStore(Mapping[str, Node]):
    """Ordered, uniquely named trainable matrices with gradient buffers."""

    def __init__(self):
        self._params: OrderedDict[str, Node] = OrderedDict()

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = Node(as_matrix(value, name).copy(), requires_grad=True, name=name)
        node.grad = np.zeros_like(node.value)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def zero_grad(self) -> None:
        for node in self._params.values():
            node.grad = np.zeros_like(node.value)

    def size(self) -> int:
        return int(sum(node.value.size for node in self._params.values()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self._params.items()}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        for name, value in values.items():
            node = self._params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != node.value.shape:
                raise ShapeError(f"load {name}", node.value.shape, value.shape)
            node.value = value.copy()


@dataclass
class AdamState:
    """Moment buffers for Adam; ``lr`` holds one learning rate per parameter."""

    lr: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, lr: float | Callable[[str], float] = 1e-3,
                   **kwargs) -> "AdamState":
        rate = lr if callable(lr) else (lambda _name: lr)
        state = cls(lr={name: float(rate(name)) for name in params}, **kwargs)
        for name, node in params.items():
            state.m[name] = np.zeros_like(node.value)
            state.v[name] = np.zeros_like(node.value)
        return state


def adam_step(params: ParamStore, state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place using ``params[*].grad``."""
    for name, node in params.items():
        if not np.all(np.isfinite(node.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, node in params.items():
        lr = state.lr[name]
        if lr == 0.0:
            continue
        g = node.grad
        with np.errstate(over="ignore", invalid="ignore"):
            m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
            v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
            value = node.value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"Adam update overflowed for parameter {name!r}")
        state.m[name], state.v[name] = m, v
        node.value = value


def grad_check(loss_fn: Callable[[ParamStore], Node], params: ParamStore,
               eps: float = 1e-5, names: Iterable[str] | None = None) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The relative error of each entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params.zero_grad()
    loss = loss_fn(params)
    if not np.all(np.isfinite(loss.value)):
        raise NonFiniteError("loss is not finite")
    backward(loss)
    worst = 0.0
    for name in (names if names is not None else list(params)):
        node = params[name]
        analytic = node.grad.copy()
        flat = node.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn(params).value.sum())
            flat[i] = orig - eps
            down = float(loss_fn(params).value.sum())
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"loss not finite while perturbing {name!r}")
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic.flat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
