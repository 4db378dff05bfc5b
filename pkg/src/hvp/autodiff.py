"""Tape-based reverse-mode differentiation over dense float64 arrays.

Values are plain ``numpy`` arrays. A :class:`Var` wraps an array that was
produced while a :class:`Tape` was recording; every op below accepts either
arrays or ``Var`` objects and only records when at least one input is a
``Var``. Code written against these ops therefore runs unchanged with or
without a tape.

    tape = Tape()
    w = tape.watch("w", np.array([3.0]))
    loss = sum(w * w)
    backward(tape, loss)["w"]  # -> array([6.])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Var", "Tape", "backward", "grad_wrt", "value", "stop_gradient",
    "exp", "log", "sqrt", "tanh", "sigmoid", "silu", "square",
    "sum", "mean", "reshape", "concat", "clip", "logsumexp", "softmax",
    "matmul",
]


class Tape:
    """Ordered record of primitive ops.

    ``nodes[i]`` holds the parents of node ``i`` together with the
    vector-Jacobian closures mapping the node's cotangent to each parent's.
    Because nodes are appended as they are computed, walking the list
    backwards is a valid reverse topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[tuple[int, ...], tuple[Callable, ...]]] = []
        self.leaves: dict[str, Var] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _new(self, val: np.ndarray, parents: Sequence[tuple["Var", Callable]]) -> "Var":
        out = Var(val, self, len(self.nodes))
        self.nodes.append((tuple(p.index for p, _ in parents), tuple(f for _, f in parents)))
        return out

    def watch(self, name: str, val) -> "Var":
        """Register a named leaf. Watching the same name twice returns the same leaf."""
        if name in self.leaves:
            return self.leaves[name]
        leaf = self._new(np.asarray(val, dtype=np.float64), ())
        self.leaves[name] = leaf
        return leaf


class Var:
    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, val: np.ndarray, tape: Tape, index: int) -> None:
        self.value = val
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, index={self.index})"

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

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def value(x) -> np.ndarray:
    """Underlying array of ``x`` (identity for arrays)."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


stop_gradient = value


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _record(val, tape: Tape | None, parents: Iterable[tuple[object, Callable]]):
    if tape is None:
        return val
    return tape._new(val, [(p, f) for p, f in parents if isinstance(p, Var)])


# -- elementwise binary ----------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    return _record(out, _tape_of(a, b), [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ])


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    return _record(out, _tape_of(a, b), [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: -_unbroadcast(g, bv.shape)),
    ])


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    return _record(out, _tape_of(a, b), [
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ])


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _record(out, _tape_of(a, b), [
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
    ])


def neg(a):
    return _record(-value(a), _tape_of(a), [(a, lambda g: -g)])


def power(a, p: float):
    if isinstance(p, Var):
        raise ContractError("only constant exponents are supported")
    av = value(a)
    out = av ** p
    return _record(out, _tape_of(a), [(a, lambda g: g * p * av ** (p - 1))])


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise DimensionError(f"matmul shapes {av.shape} and {bv.shape} do not align")
    out = av @ bv

    def ga(g):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv)
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def gb(g):
        if av.ndim == 1:
            return np.multiply.outer(av, g)
        if bv.ndim == 1:
            return np.tensordot(g, av, axes=g.ndim)
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _record(out, _tape_of(a, b), [(a, ga), (b, gb)])


# -- elementwise unary -----------------------------------------------------

def exp(a):
    out = np.exp(value(a))
    return _record(out, _tape_of(a), [(a, lambda g: g * out)])


def log(a):
    av = value(a)
    return _record(np.log(av), _tape_of(a), [(a, lambda g: g / av)])


def sqrt(a):
    out = np.sqrt(value(a))
    return _record(out, _tape_of(a), [(a, lambda g: g * 0.5 / out)])


def square(a):
    av = value(a)
    return _record(av * av, _tape_of(a), [(a, lambda g: 2.0 * g * av)])


def tanh(a):
    out = np.tanh(value(a))
    return _record(out, _tape_of(a), [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * value(a)))
    return _record(out, _tape_of(a), [(a, lambda g: g * out * (1.0 - out))])


def silu(a):
    av = value(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    out = av * sig
    return _record(out, _tape_of(a), [(a, lambda g: g * sig * (1.0 + av * (1.0 - sig)))])


def clip(a, lo: float, hi: float):
    """Clamp to ``[lo, hi]``; the gradient is the a.e. subgradient (zero when clamped)."""
    av = value(a)
    out = np.clip(av, lo, hi)
    inside = (av > lo) & (av < hi)
    return _record(out, _tape_of(a), [(a, lambda g: g * inside)])


# -- reductions and shape ops ---------------------------------------------

def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _record(out, _tape_of(a), [(a, vjp)])


def mean(a, axis=None, keepdims: bool = False):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) / float(n)


def reshape(a, shape):
    av = value(a)
    return _record(av.reshape(shape), _tape_of(a), [(a, lambda g: g.reshape(av.shape))])


def getitem(a, idx):
    av = value(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return _record(av[idx], _tape_of(a), [(a, vjp)])


def concat(xs: Sequence, axis: int = -1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def piece(i):
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return _record(out, _tape_of(*xs), [(x, piece(i)) for i, x in enumerate(xs)])


def logsumexp(a, axis: int = -1, keepdims: bool = False):
    av = value(a)
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(av - m), axis=axis, keepdims=True)
    out_k = np.log(s) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return g * np.exp(av - out_k)

    return _record(out, _tape_of(a), [(a, vjp)])


def softmax(a, axis: int = -1):
    return exp(a - logsumexp(a, axis=axis, keepdims=True))


# -- gradients -------------------------------------------------------------

def _accumulate(tape: Tape, out: Var) -> dict[int, np.ndarray]:
    if not isinstance(out, Var) or out.tape is not tape:
        raise ContractError("output was not recorded on this tape")
    if out.value.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {out.value.shape}")
    grads: dict[int, np.ndarray] = {out.index: np.ones_like(out.value)}
    for i in range(out.index, -1, -1):
        g = grads.get(i)
        if g is None:
            continue
        parents, vjps = tape.nodes[i]
        for p, f in zip(parents, vjps):
            contrib = f(g)
            grads[p] = grads[p] + contrib if p in grads else contrib
    return grads


def backward(tape: Tape, out: Var) -> dict[str, np.ndarray]:
    """Gradient of scalar ``out`` with respect to every watched leaf.

    Leaves that ``out`` does not depend on get zero gradients.
    """
    grads = _accumulate(tape, out)
    return {
        name: np.reshape(grads[v.index], v.shape) if v.index in grads else np.zeros_like(v.value)
        for name, v in tape.leaves.items()
    }


def grad_wrt(tape: Tape, out: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradient of scalar ``out`` with respect to arbitrary recorded nodes."""
    grads = _accumulate(tape, out)
    return [np.reshape(grads[v.index], v.shape) if v.index in grads else np.zeros_like(v.value)
            for v in wrt]
