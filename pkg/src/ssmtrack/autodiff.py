"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Var` wraps a numpy array. While a :class:`Tape` is active, every
primitive records its inputs and a backward closure on the tape; outside a
tape the same primitives are plain numpy math with no graph overhead, which
keeps inference cheap.

Gradients are exact (no stochastic estimators) and the whole engine is
deterministic: identical inputs produce bit-identical outputs and gradients.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

ArrayLike = Union["Var", np.ndarray, float, int]

_TAPE_STACK: list["Tape"] = []


class Var:
    """Array value plus (optional) links into the recording tape."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(
        self,
        value,
        parents: tuple = (),
        backward_fn: Optional[Callable[[np.ndarray], tuple]] = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

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


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Creation order is a valid topological order (inputs exist before the
    ops that consume them), so the backward pass is a single reversed sweep
    that visits each node exactly once.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_var(x: ArrayLike) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(value: np.ndarray, parents: tuple, backward_fn) -> Var:
    tape = active_tape()
    if tape is None:
        return Var(value)
    out = Var(value, parents=parents, backward_fn=backward_fn)
    tape.nodes.append(out)
    return out


def grad(loss: Var, tape: Tape, params: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. ``params``.

    Parameters the loss does not depend on get a zero gradient. All .grad
    buffers touched by the sweep are cleared afterwards so tapes and
    parameters can be reused.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    touched = [loss]
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g
                touched.append(parent)
            else:
                parent.grad = parent.grad + g
    out = []
    for p in params:
        out.append(p.grad if p.grad is not None else np.zeros_like(p.value))
    for node in touched:
        node.grad = None
    for p in params:
        p.grad = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- arithmetic -----------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value + b.value

    def backward(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _make(out, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value - b.value

    def backward(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _make(out, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value * b.value

    def backward(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _make(out, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value / b.value

    def backward(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    return _make(out, (a, b), backward)


def neg(a: ArrayLike) -> Var:
    a = as_var(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def matmul(a: ArrayLike, b: ArrayLike) -> Var:
    """Matrix product; supports stacked left operands against a 2-D right."""
    a, b = as_var(a), as_var(b)
    out = a.value @ b.value

    def backward(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        if gb.ndim > b.value.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - b.value.ndim)))
        if ga.ndim > a.value.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - a.value.ndim)))
        return ga, gb

    return _make(out, (a, b), backward)


def pow_scalar(a: ArrayLike, p: float) -> Var:
    a = as_var(a)
    out = a.value**p

    def backward(g):
        return (g * p * a.value ** (p - 1),)

    return _make(out, (a,), backward)


def exp(a: ArrayLike) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


# --- reductions and shape ops ---------------------------------------------


def reduce_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.value.shape).copy(),)

    return _make(out, (a,), backward)


def reduce_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.value.shape[ax] for ax in axes]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: ArrayLike, shape) -> Var:
    a = as_var(a)
    out = a.value.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.value.shape),))


def flip(a: ArrayLike, axis: int) -> Var:
    a = as_var(a)
    out = np.flip(a.value, axis=axis).copy()
    return _make(out, (a,), lambda g: (np.flip(g, axis=axis),))


def narrow(a: ArrayLike, axis: int, start: int, length: int) -> Var:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_var(a)
    index = [slice(None)] * a.value.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.value[index].copy()

    def backward(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return (full,)

    return _make(out, (a,), backward)


def concat(parts: Sequence[ArrayLike], axis: int) -> Var:
    parts = [as_var(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]

    def backward(g):
        grads = []
        offset = 0
        for size in sizes:
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            grads.append(g[tuple(index)])
            offset += size
        return tuple(grads)

    return _make(out, tuple(parts), backward)


def stack(parts: Sequence[ArrayLike], axis: int) -> Var:
    parts = [as_var(p) for p in parts]
    out = np.stack([p.value for p in parts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make(out, tuple(parts), backward)


# --- nonlinearities --------------------------------------------------------


def sigmoid(a: ArrayLike) -> Var:
    a = as_var(a)
    out = expit(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: ArrayLike) -> Var:
    a = as_var(a)
    s = expit(a.value)
    out = a.value * s
    return _make(out, (a,), lambda g: (g * s * (1.0 + a.value * (1.0 - s)),))


def softplus(a: ArrayLike) -> Var:
    a = as_var(a)
    out = np.logaddexp(0.0, a.value)

    def backward(g):
        return (g * expit(a.value),)

    return _make(out, (a,), backward)


def smooth_l1(a: ArrayLike) -> Var:
    """Elementwise Huber kernel: 0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    a = as_var(a)
    absx = np.abs(a.value)
    out = np.where(absx < 1.0, 0.5 * a.value * a.value, absx - 0.5)

    def backward(g):
        return (g * np.clip(a.value, -1.0, 1.0),)

    return _make(out, (a,), backward)


def affine(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Var:
    """x @ weight (+ bias) over the trailing feature axis."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def layer_norm(
    x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5
) -> Var:
    """Normalize the trailing axis to zero mean / unit variance, then scale."""
    x = as_var(x)
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv_std = pow_scalar(add(var, eps), -0.5)
    return add(mul(mul(centered, inv_std), gain), bias)


def depthwise_causal_conv(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Var:
    """Per-channel causal convolution along time.

    x is (..., T, C), weight is (C, K), bias is (C,). The input is zero
    padded with K-1 steps on the left so output step t never reads past t.
    """
    x = as_var(x)
    weight = as_var(weight)
    t_len = x.value.shape[-2]
    channels, width = weight.value.shape
    pad_shape = x.value.shape[:-2] + (width - 1, x.value.shape[-1])
    padded = concat([Var(np.zeros(pad_shape)), x], axis=-2)
    out = None
    for k in range(width):
        tap_weight = reshape(narrow(weight, 1, k, 1), (channels,))
        tap = mul(narrow(padded, -2, k, t_len), tap_weight)
        out = tap if out is None else add(out, tap)
    return add(out, bias)
