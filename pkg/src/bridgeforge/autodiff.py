"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every operation here accepts a mix of plain ``np.ndarray`` inputs and
:class:`Node` inputs.  If at least one input is a Node the result is a Node
recorded on an implicit tape (the DAG of Node parents); otherwise the result
is a plain array and nothing is recorded.  This lets the exact same model
code run in a fast untracked mode (evaluation) and a tracked mode (training)
depending only on whether the parameters were wrapped in Nodes.

The tape is rebuilt from scratch on every loss evaluation and is consumed by
:func:`backward`, which accumulates adjoints into ``Node.grad``.
"""

from __future__ import annotations

import itertools

import numpy as np

_COUNTER = itertools.count()

__all__ = [
    "Node",
    "ParamStore",
    "backward",
    "is_node",
    "value_of",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_const",
    "rsub_const",
    "matmul",
    "mm3",
    "transpose",
    "tanh",
    "logcosh2",
    "lipswish",
    "square",
    "absval",
    "asum",
    "amean",
    "concat_rows",
    "take_rows",
    "expand_mid",
    "expand_last",
    "scalar_field",
    "vector_field",
]


class Node:
    """A value on the tape: a float64 array plus the rule to push adjoints
    back to its parents.

    ``pulls`` is a tuple of ``(parent, pull_fn)`` pairs where ``pull_fn``
    maps this node's adjoint to the parent's adjoint contribution.
    """

    __slots__ = ("value", "pulls", "idx", "grad")

    def __init__(self, value, pulls=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.pulls = tuple(pulls)
        self.idx = next(_COUNTER)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, idx={self.idx})"

    # Arithmetic sugar; each delegates to the module-level op.
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __truediv__(self, other):
        if is_node(other):
            raise TypeError("division by a tracked value is not supported")
        return scale(self, 1.0 / float(other))


def is_node(x) -> bool:
    return isinstance(x, Node)


def value_of(x):
    """Underlying array of ``x`` whether or not it is tracked."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def constant(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _result(value, pulls):
    tracked = [(p, f) for p, f in pulls if isinstance(p, Node)]
    if not tracked:
        return value
    return Node(value, tracked)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _result(out, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ])


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _result(out, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    ])


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _result(out, [
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ])


def neg(a):
    av = value_of(a)
    return _result(-av, [(a, lambda g: -g)])


def scale(a, k: float):
    av = value_of(a)
    k = float(k)
    return _result(av * k, [(a, lambda g: g * k)])


def add_const(a, c):
    av = value_of(a)
    cv = constant(c)
    return _result(av + cv, [(a, lambda g: _unbroadcast(g, av.shape))])


def rsub_const(c, a):
    """``c - a`` with ``c`` constant."""
    av = value_of(a)
    return _result(constant(c) - av, [(a, lambda g: _unbroadcast(-g, av.shape))])


def tanh(a):
    av = value_of(a)
    t = np.tanh(av)
    return _result(t, [(a, lambda g: g * (1.0 - t * t))])


def logcosh2(a):
    """log(exp(x) + exp(-x)), computed as |x| + log1p(exp(-2|x|)).

    Stable for large |x|; derivative tanh(x), second derivative 1 - tanh^2.
    """
    av = value_of(a)
    ax = np.abs(av)
    out = ax + np.log1p(np.exp(-2.0 * ax))
    return _result(out, [(a, lambda g: g * np.tanh(av))])


def lipswish(a):
    """x * sigmoid(x) / 1.1 (Lipschitz-bounded swish)."""
    av = value_of(a)
    s = 1.0 / (1.0 + np.exp(-av))
    out = av * s / 1.1
    return _result(out, [(a, lambda g: g * (s * (1.0 + av * (1.0 - s)) / 1.1))])


def square(a):
    av = value_of(a)
    return _result(av * av, [(a, lambda g: g * (2.0 * av))])


def absval(a):
    av = value_of(a)
    return _result(np.abs(av), [(a, lambda g: g * np.sign(av))])


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv
    return _result(out, [
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ])


def mm3(a, b):
    """Batched matrix product 'pq,qrn->prn' of a 2-d matrix with a stack of
    per-sample Jacobian columns (reshaped matmuls; einsum path search is too
    slow for the small operands hit here)."""
    av, bv = value_of(a), value_of(b)
    p, q = av.shape
    q2, r, n = bv.shape
    bflat = bv.reshape(q2, r * n)
    out = (av @ bflat).reshape(p, r, n)

    def pull_a(g):
        return g.reshape(p, r * n) @ bflat.T

    def pull_b(g):
        return (av.T @ g.reshape(p, r * n)).reshape(q2, r, n)

    return _result(out, [(a, pull_a), (b, pull_b)])


def transpose(a):
    av = value_of(a)
    return _result(av.T, [(a, lambda g: g.T)])


# ---------------------------------------------------------------------------
# reductions and shape ops

def asum(a, axis=None, keepdims=False):
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def pull(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg, av.shape).copy() if gg.shape != av.shape else gg

    return _result(out, [(a, pull)])


def amean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    out = np.mean(av, axis=axis, keepdims=keepdims)

    def pull(g):
        gg = np.asarray(g) / n
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg, av.shape).copy() if gg.shape != av.shape else gg

    return _result(out, [(a, pull)])


def concat_rows(*parts):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=0)
    offsets = np.cumsum([0] + [v.shape[0] for v in vals])
    pulls = []
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        pulls.append((p, lambda g, lo=lo, hi=hi: g[lo:hi]))
    return _result(out, pulls)


def take_rows(a, lo: int, hi: int):
    av = value_of(a)
    out = av[lo:hi]

    def pull(g):
        full = np.zeros_like(av)
        full[lo:hi] = g
        return full

    return _result(out, [(a, pull)])


def expand_mid(a):
    """(m, n) -> (m, 1, n)"""
    av = value_of(a)
    return _result(av[:, None, :], [(a, lambda g: g[:, 0, :])])


def expand_last(a):
    """(m, k) -> (m, k, 1)"""
    av = value_of(a)
    return _result(av[:, :, None], [(a, lambda g: g[:, :, 0])])


# ---------------------------------------------------------------------------
# external fields

def scalar_field(x, fn):
    """Per-sample scalar field of batched positions x (d, n) -> (1, n).

    ``fn`` returns ``(values, grad)`` where ``grad`` is the spatial gradient
    (d, n); the gradient is used to route adjoints back through x.
    """
    xv = value_of(x)
    vals, grad = fn(xv)
    vals = np.asarray(vals, dtype=np.float64).reshape(1, -1)
    return _result(vals, [(x, lambda g: np.asarray(grad) * g)])


def vector_field(x, fn, differentiable=False):
    """Per-sample vector field (d, n) -> (d, n) evaluated from data.

    Non-differentiable fields (nearest-neighbour lookups) contribute zero
    adjoint to x; otherwise ``fn`` must return ``(values, pull)`` with a
    custom vector-Jacobian product.
    """
    xv = value_of(x)
    if differentiable:
        vals, pull = fn(xv)
        return _result(np.asarray(vals, dtype=np.float64), [(x, pull)])
    vals = np.asarray(fn(xv), dtype=np.float64)
    return _result(vals, [(x, lambda g: np.zeros_like(xv))])


# ---------------------------------------------------------------------------
# backward pass

def backward(root: Node) -> None:
    """Accumulate ``d root / d node`` into ``node.grad`` for every tape node
    reachable from the scalar ``root``.

    Adjoints are accumulated in a fixed reverse-creation order, so repeated
    runs on identical tapes produce bit-identical gradients.
    """
    if not isinstance(root, Node):
        raise TypeError("backward expects a tracked Node")
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")

    # Collect reachable nodes (iterative DFS keeps deep tapes off the
    # Python recursion stack).
    seen = {root.idx: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for parent, _ in node.pulls:
            if parent.idx not in seen:
                seen[parent.idx] = parent
                stack.append(parent)

    order = sorted(seen.values(), key=lambda n: n.idx, reverse=True)
    root.grad = np.ones_like(root.value)
    for node in order:
        g = node.grad
        if g is None:
            continue
        for parent, pull in node.pulls:
            contrib = pull(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64)
            else:
                parent.grad = parent.grad + contrib


class ParamStore:
    """Named leaf parameters with matching adjoint slots.

    Parameters are exposed as Nodes so model code records onto the tape;
    after :func:`backward` their ``grad`` fields hold the loss adjoints.
    """

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Node] = {}
        if arrays:
            for name, arr in arrays.items():
                self.add(name, arr)

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        node = Node(np.array(value, dtype=np.float64))
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def values_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self._params.items()}

    def grads_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self._params.items():
            out[k] = np.zeros_like(v.value) if v.grad is None else v.grad
        return out

    def zero_grads(self) -> None:
        for v in self._params.values():
            v.grad = None

    def set_values(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            node = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != node.value.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {arr.shape} != {node.value.shape}")
            node.value = arr.copy()

    def accumulate_grads(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            node = self._params[name]
            node.grad = g.copy() if node.grad is None else node.grad + g
