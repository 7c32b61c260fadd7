"""Minimal reverse-mode differentiation on numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Node` objects
in creation order, which is already a topological order, so the backward pass
is a single reversed sweep over the recorded list.

The op functions (``exp``, ``log``, ``affine``, ...) dispatch on their input:
given plain arrays or floats they evaluate with numpy and return arrays, given
a :class:`Node` they record on that node's tape.  Model code is therefore
written once and runs either traced or untraced.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Adam",
    "DomainError",
    "NonFiniteGradientError",
    "Node",
    "Parameter",
    "SGD",
    "Tape",
    "affine",
    "exp",
    "log",
    "matmul",
    "maximum",
    "mean",
    "minimum",
    "reciprocal",
    "relu",
    "reshape",
    "softplus",
    "sum",
    "tanh",
    "value_of",
]

_ids = itertools.count()


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by an optimizer step when a gradient contains NaN or inf."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class Parameter:
    """A trainable float64 array with a gradient accumulator of the same shape."""

    def __init__(self, value, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name if name is not None else f"param{next(_ids)}"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Node:
    __slots__ = ("tape", "index", "value", "parents", "vjp", "grad", "param")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, tape, value, parents=(), vjp=None, param=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.param = param
        self.grad = None
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)

    def __repr__(self) -> str:
        return f"Node(#{self.index}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, negative(other))

    def __rsub__(self, other):
        return add(other, negative(self))

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return multiply(self, reciprocal(other))
        return multiply(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return multiply(other, reciprocal(self))

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Append-only record of a computation, consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._watched: dict[int, Node] = {}
        self._consumed = False

    def constant(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=np.float64))

    def watch(self, param: Parameter) -> Node:
        """Leaf node whose gradient is accumulated into ``param.grad``."""
        node = self._watched.get(id(param))
        if node is None:
            node = Node(self, param.value, param=param)
            self._watched[id(param)] = node
        return node

    def record(self, value, parents, vjp) -> Node:
        return Node(self, value, tuple(parents), vjp)

    def backward(self, output: Node, seed=None) -> None:
        """Propagate d(output) back to every watched parameter.

        ``seed`` defaults to 1 and is required when ``output`` is not a scalar.
        """
        if output.tape is not self:
            raise ValueError("output node belongs to a different tape")
        if self._consumed:
            raise RuntimeError("backward already ran on this tape")
        if seed is None:
            if np.size(output.value) != 1:
                raise ValueError("seed required for non-scalar output")
            seed = np.ones_like(output.value)
        self._consumed = True
        output.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(self.nodes[: output.index + 1]):
            if node.grad is None:
                continue
            if node.vjp is not None:
                for parent, g in zip(node.parents, node.vjp(node.grad)):
                    if parent is None or g is None:
                        continue
                    g = _unbroadcast(g, parent.shape)
                    parent.grad = g if parent.grad is None else parent.grad + g
            elif node.param is not None:
                node.param.grad += node.grad


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is not None and x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _parent(x):
    return x if isinstance(x, Node) else None


def _check_shapes(a, b):
    sa, sb = np.shape(a), np.shape(b)
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ValueError(f"shape mismatch: {sa} vs {sb}") from None


def add(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    _check_shapes(va, vb)
    if tape is None:
        return np.add(va, vb)
    return tape.record(va + vb, (_parent(a), _parent(b)), lambda g: (g, g))


def negative(a):
    if not isinstance(a, Node):
        return np.negative(a)
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def multiply(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    _check_shapes(va, vb)
    if tape is None:
        return np.multiply(va, vb)
    return tape.record(va * vb, (_parent(a), _parent(b)), lambda g: (g * vb, g * va))


def matmul(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    if np.ndim(va) != 2 or np.ndim(vb) != 2 or va.shape[1] != vb.shape[0]:
        raise ValueError(f"matmul shape mismatch: {np.shape(va)} @ {np.shape(vb)}")
    if tape is None:
        return va @ vb
    return tape.record(va @ vb, (_parent(a), _parent(b)), lambda g: (g @ vb.T, va.T @ g))


def affine(x, weight, bias):
    """``x @ weight + bias`` for a (batch, in) input and (in, out) weight."""
    tape = _tape_of(x, weight, bias)
    vx, vw, vb = value_of(x), value_of(weight), value_of(bias)
    if np.ndim(vx) != 2 or np.ndim(vw) != 2 or vx.shape[1] != vw.shape[0]:
        raise ValueError(f"affine shape mismatch: {np.shape(vx)} @ {np.shape(vw)}")
    if np.shape(vb) != (vw.shape[1],):
        raise ValueError(f"bias shape {np.shape(vb)} does not match {vw.shape[1]} outputs")
    out = vx @ vw + vb
    if tape is None:
        return out
    return tape.record(
        out,
        (_parent(x), _parent(weight), _parent(bias)),
        lambda g: (g @ vw.T, vx.T @ g, g.sum(axis=0)),
    )


def tanh(x):
    if not isinstance(x, Node):
        return np.tanh(x)
    y = np.tanh(x.value)
    return x.tape.record(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x):
    if not isinstance(x, Node):
        return np.maximum(x, 0.0)
    active = x.value > 0
    return x.tape.record(np.where(active, x.value, 0.0), (x,), lambda g: (g * active,))


def exp(x):
    if not isinstance(x, Node):
        return np.exp(x)
    y = np.exp(x.value)
    return x.tape.record(y, (x,), lambda g: (g * y,))


def log(x):
    vx = value_of(x)
    if np.any(np.asarray(vx) <= 0):
        raise DomainError("log of non-positive input")
    if not isinstance(x, Node):
        return np.log(x)
    return x.tape.record(np.log(vx), (x,), lambda g: (g / vx,))


def reciprocal(x):
    vx = value_of(x)
    if np.any(np.asarray(vx) <= 0):
        raise DomainError("reciprocal of non-positive input")
    if not isinstance(x, Node):
        return 1.0 / np.asarray(x, dtype=np.float64)
    y = 1.0 / vx
    return x.tape.record(y, (x,), lambda g: (-g * y * y,))


def softplus(x):
    """``log(1 + exp(x))`` evaluated without overflow."""
    vx = value_of(x)
    y = np.logaddexp(0.0, vx)
    if not isinstance(x, Node):
        return y
    sig = np.exp(vx - y)
    return x.tape.record(y, (x,), lambda g: (g * sig,))


def maximum(x, c: float):
    """Elementwise ``max(x, c)`` against a constant.

    Subgradient is 1 where ``x >= c``: ties go to the ``x`` branch.
    """
    if isinstance(c, Node):
        raise TypeError("maximum takes a constant second operand")
    if not isinstance(x, Node):
        return np.maximum(x, c)
    active = x.value >= c
    return x.tape.record(np.where(active, x.value, c), (x,), lambda g: (g * active,))


def minimum(x, c: float):
    """Elementwise ``min(x, c)``; ties go to the ``x`` branch."""
    return negative(maximum(negative(x), -c))


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    if not isinstance(x, Node):
        return np.sum(x, axis=axis)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return x.tape.record(np.sum(x.value, axis=axis), (x,), vjp)


def mean(x, axis=None):
    n = np.size(value_of(x)) if axis is None else np.shape(value_of(x))[axis]
    return multiply(sum(x, axis=axis), 1.0 / n)


def reshape(x, shape):
    if not isinstance(x, Node):
        return np.reshape(x, shape)
    old = x.shape
    return x.tape.record(np.reshape(x.value, shape), (x,), lambda g: (np.reshape(g, old),))


class _Optimizer:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = float(lr)
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(p.name)
        self.steps += 1
        self._update()
        self.zero_grad()

    def _update(self) -> None:
        raise NotImplementedError


class SGD(_Optimizer):
    def _update(self):
        for p in self.params:
            p.value -= self.lr * p.grad


class Adam(_Optimizer):
    """Adam with bias-corrected first and second moments."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def _update(self):
        t = self.steps
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
