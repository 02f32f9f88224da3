"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive works on plain ``np.ndarray`` inputs as well as on ``Var``
inputs, so model and loss code is written once and runs either untracked
(fast forward passes) or recorded on a :class:`Tape`.

    with Tape() as tape:
        x = tape.watch(np.array([3.0]))
        y = (x * x).sum()
    (gx,) = tape.gradient(y, [x])
"""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class UnreachedGradientWarning(UserWarning):
    """A requested input does not influence the differentiated output."""


class Tape:
    """Records primitive operations in creation order for backward replay."""

    def __init__(self) -> None:
        self.nodes: list[Var] = []
        # smallest distance of any recorded kink argument (relu, max, clip) to its kink
        self.kink_margin = np.inf
        self.unreached: list[int] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def watch(self, value) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), (), None, self)

    def _note_kink(self, distance: np.ndarray) -> None:
        if distance.size:
            self.kink_margin = min(self.kink_margin, float(np.min(distance)))

    def gradient(self, output: "Var", inputs: Sequence["Var"]) -> list[np.ndarray]:
        """Gradients of the scalar ``output`` with respect to each of ``inputs``.

        Inputs that were not recorded on this tape, or that do not reach
        ``output``, get a zero gradient and their positions are listed in
        ``self.unreached`` (a warning is emitted as well).
        """
        if not isinstance(output, Var) or output.tape is not self:
            raise ValueError("output was not produced on this tape")
        if output.data.size != 1:
            raise ValueError(f"output must be scalar, got shape {output.data.shape}")
        keep = {x.index for x in inputs if isinstance(x, Var) and x.tape is self}
        grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.data)}
        for node in reversed(self.nodes[: output.index + 1]):
            if node.backward is None or node.index not in grads:
                continue
            g = grads[node.index] if node.index in keep else grads.pop(node.index)
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not isinstance(parent, Var) or parent.tape is not self:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        out = []
        self.unreached = []
        for k, x in enumerate(inputs):
            if isinstance(x, Var) and x.tape is self and x.index in grads:
                out.append(np.asarray(grads[x.index], dtype=np.float64).reshape(x.shape))
            else:
                data = x.data if isinstance(x, Var) else np.asarray(x)
                out.append(np.zeros(np.shape(data)))
                self.unreached.append(k)
        if self.unreached:
            warnings.warn(
                f"inputs {self.unreached} are not on the tape path; zero gradient returned",
                UnreachedGradientWarning,
                stacklevel=2,
            )
        return out


class Var:
    """An array value recorded on a tape."""

    __slots__ = ("data", "parents", "backward", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, data, parents, backward, tape: Tape) -> None:
        self.data = data
        self.parents = parents
        self.backward = backward
        self.tape = tape
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape}, index={self.index})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value(x) -> np.ndarray:
    """Underlying array of a Var or array-like."""
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data, parents, backward: Callable) -> Var | np.ndarray:
    tape = _tape_of(*parents)
    if tape is None:
        return data
    return Var(data, parents, backward, tape)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    return _make(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    return _make(out, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    return _make(
        out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def power(a, p: float):
    av = value(a)
    out = av**p
    return _make(out, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a):
    av = value(a)
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a):
    av = value(a)
    out = np.sqrt(av)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a):
    out = np.exp(value(a))
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    return _make(np.log(av), (a,), lambda g: (g / av,))


# -- nonsmooth primitives ---------------------------------------------------


def relu(a):
    av = value(a)
    tape = _tape_of(a)
    if tape is None:
        return np.maximum(av, 0.0)
    tape._note_kink(np.abs(av))
    mask = av > 0
    return Var(av * mask, (a,), lambda g: (g * mask,), tape)


def maximum(a, b):
    av, bv = value(a), value(b)
    out = np.maximum(av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    tape._note_kink(np.abs(av - bv))
    pick_a = av >= bv
    return Var(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, av.shape), _unbroadcast(g * ~pick_a, bv.shape)),
        tape,
    )


def minimum(a, b):
    return mul(maximum(mul(a, -1.0), mul(b, -1.0)), -1.0)


def note_kink(x, distance) -> None:
    """Record a caller-managed kink margin on the tape ``x`` lives on."""
    tape = _tape_of(x)
    if tape is not None:
        tape._note_kink(np.abs(np.asarray(distance, dtype=np.float64)))


def clip(a, lo, hi, track: bool = True):
    av = value(a)
    out = np.clip(av, lo, hi)
    tape = _tape_of(a)
    if tape is None:
        return out
    if track:
        tape._note_kink(np.minimum(np.abs(av - lo), np.abs(av - hi)))
    inside = (av > lo) & (av < hi)
    return Var(out, (a,), lambda g: (g * inside,), tape)


def where(cond, a, b):
    """Select elementwise; ``cond`` is treated as a constant."""
    cond = np.asarray(cond, dtype=bool)
    av, bv = value(a), value(b)
    out = np.where(cond, av, bv)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), av.shape), _unbroadcast(np.where(cond, 0.0, g), bv.shape)),
    )


# -- reductions and shape ---------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False):
    av = value(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[ax] for ax in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) / float(n)


def reshape(a, shape):
    av = value(a)
    return _make(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None):
    av = value(a)
    out = np.transpose(av, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int):
    av = value(a)
    return _make(np.swapaxes(av, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, idx):
    av = value(a)

    def back(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _make(av[idx], (a,), back)


def concat(xs: Sequence, axis: int = -1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs: Sequence, axis: int = 0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    n = len(vals)
    return _make(
        out, tuple(xs), lambda g: tuple(np.take(g, k, axis=axis) for k in range(n))
    )


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv

    def back(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if isinstance(a, Var):
            ga = g2 @ np.swapaxes(b2, -1, -2)
            if av.ndim == 1:
                ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
            ga = _unbroadcast(ga, av.shape)
        if isinstance(b, Var):
            gb = np.swapaxes(a2, -1, -2) @ g2
            if bv.ndim == 1:
                gb = gb[..., 0]
            gb = _unbroadcast(gb, bv.shape)
        return ga, gb

    return _make(out, (a, b), back)


def cross(a, b):
    """Cross product along the last axis."""
    av, bv = value(a), value(b)
    out = np.cross(av, bv)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.cross(bv, g), av.shape), _unbroadcast(np.cross(g, av), bv.shape)),
    )


def dot(a, b, axis: int = -1, keepdims: bool = False):
    return sum_(mul(a, b), axis=axis, keepdims=keepdims)


def norm(a, axis: int = -1, keepdims: bool = False):
    av = value(a)
    out = np.sqrt((av * av).sum(axis=axis, keepdims=True))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (g * av / safe,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), back)
