"""Minimal reverse-mode gradient engine over dense float64 arrays.

Forward ops are recorded on an explicit :class:`GradTape`; ``backward``
replays the record in exact reverse forward order, so gradient
accumulation order is fixed and runs are bit-reproducible for a given
seed. With no active tape every op is a plain numpy computation, which
is the fast path used for sampling and evaluation.

Everything is computed in 64-bit floats. The op set is deliberately
small: elementwise arithmetic, reductions, (masked) linear layers and a
couple of structural ops are all the flow stack needs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not match the op contract."""


class StateError(RuntimeError):
    """Tape used out of order (e.g. backward without a forward)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Dense row-major float64 array with a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what}")
        return self

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped without grad
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


_TLS = threading.local()


class GradTape:
    """Ordered record of forward ops with enough state for backward.

    Use as a context manager around the forward pass. ``backward`` seeds
    the loss gradient, replays the recorded ops newest-first and returns
    a map from each touched leaf (parameter) tensor to its gradient.
    Leaf accumulators start at zero on every call; a tape can only be
    consumed once.
    """

    def __init__(self):
        self._ops: list = []
        self._leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._produced: set[int] = set()
        self._consumed = False

    # -- context management -------------------------------------------------
    def __enter__(self) -> "GradTape":
        if getattr(_TLS, "tape", None) is not None:
            raise StateError("a GradTape is already active in this thread")
        _TLS.tape = self
        return self

    def __exit__(self, *exc):
        _TLS.tape = None
        return False

    @staticmethod
    def current() -> "GradTape | None":
        return getattr(_TLS, "tape", None)

    # -- recording -----------------------------------------------------------
    def _register(self, inputs, outputs, backward_fn):
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced and id(t) not in self._leaf_ids:
                self._leaf_ids.add(id(t))
                self._leaves.append(t)
        for out in outputs:
            out.requires_grad = True
            self._produced.add(id(out))
        self._ops.append(backward_fn)

    # -- replay ---------------------------------------------------------------
    def backward(self, loss: Tensor, seed_grad: float = 1.0) -> dict[Tensor, np.ndarray]:
        if self._consumed:
            raise StateError("tape already consumed by a previous backward")
        if not self._ops:
            raise StateError("backward without a recorded forward pass")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        self._consumed = True
        for leaf in self._leaves:
            leaf.grad = np.zeros_like(leaf.data)
        loss.grad = np.full_like(loss.data, seed_grad)
        for op in reversed(self._ops):
            op()
        return {leaf: leaf.grad for leaf in self._leaves}


def _record(inputs, outputs, backward_fn) -> None:
    tape = GradTape.current()
    if tape is None:
        return
    if not any(t.requires_grad for t in inputs):
        return
    tape._register(inputs, outputs, backward_fn)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Adjoint of numpy broadcasting: reduce ``g`` back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise binary ops --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data + b.data)

    def backward():
        if out.grad is None:
            return
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    _record((a, b), (out,), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data - b.data)

    def backward():
        if out.grad is None:
            return
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(-out.grad, b.data.shape))

    _record((a, b), (out,), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data * b.data)

    def backward():
        if out.grad is None:
            return
        _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    _record((a, b), (out,), backward)
    return out


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data / b.data)

    def backward():
        if out.grad is None:
            return
        _accum(a, _unbroadcast(out.grad / b.data, a.data.shape))
        _accum(b, _unbroadcast(-out.grad * out.data / b.data, b.data.shape))

    _record((a, b), (out,), backward)
    return out


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient goes to ``b``."""
    a, b = _coerce(a), _coerce(b)
    out = Tensor(np.maximum(a.data, b.data))

    def backward():
        if out.grad is None:
            return
        take_a = a.data > b.data
        _accum(a, _unbroadcast(out.grad * take_a, a.data.shape))
        _accum(b, _unbroadcast(out.grad * ~take_a, b.data.shape))

    _record((a, b), (out,), backward)
    return out


def neg(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(-a.data)

    def backward():
        if out.grad is None:
            return
        _accum(a, -out.grad)

    _record((a,), (out,), backward)
    return out


# -- elementwise unary ops ----------------------------------------------------

def unary(a: Tensor, fn, dfn) -> Tensor:
    """Elementwise op with derivative ``dfn`` evaluated at the input."""
    a = _coerce(a)
    out = Tensor(fn(a.data))

    def backward():
        if out.grad is None:
            return
        _accum(a, out.grad * dfn(a.data))

    _record((a,), (out,), backward)
    return out


def exp(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.exp(a.data))

    def backward():
        if out.grad is None:
            return
        _accum(a, out.grad * out.data)

    _record((a,), (out,), backward)
    return out


def log(a) -> Tensor:
    return unary(a, np.log, lambda x: 1.0 / x)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.sqrt(a.data))

    def backward():
        if out.grad is None:
            return
        _accum(a, out.grad * 0.5 / out.data)

    _record((a,), (out,), backward)
    return out


def square(a) -> Tensor:
    return unary(a, np.square, lambda x: 2.0 * x)


def absolute(a) -> Tensor:
    return unary(a, np.abs, np.sign)


def detach(a: Tensor) -> Tensor:
    """Value of ``a`` cut out of the graph (no gradient flows back)."""
    return Tensor(a.data)


# -- reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None) -> Tensor:
    a = _coerce(a)
    axes = _norm_axis(axis, a.data.ndim)
    out = Tensor(a.data.sum(axis=axes))

    def backward():
        if out.grad is None:
            return
        g = out.grad
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.data.shape))

    _record((a,), (out,), backward)
    return out


def tmean(a, axis=None) -> Tensor:
    a = _coerce(a)
    axes = _norm_axis(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes])) if axes else 1
    out = Tensor(a.data.mean(axis=axes))

    def backward():
        if out.grad is None:
            return
        g = out.grad / count
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.data.shape))

    _record((a,), (out,), backward)
    return out


# -- structural ops -------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.reshape(shape))

    def backward():
        if out.grad is None:
            return
        _accum(a, out.grad.reshape(a.data.shape))

    _record((a,), (out,), backward)
    return out


def split_last(a: Tensor, sizes) -> list[Tensor]:
    """Split along the last axis into consecutive blocks of ``sizes``."""
    if sum(sizes) != a.data.shape[-1]:
        raise ShapeError(f"split sizes {sizes} do not cover last dim {a.data.shape[-1]}")
    outs = []
    offsets = []
    off = 0
    for s in sizes:
        outs.append(Tensor(a.data[..., off:off + s]))
        offsets.append(off)
        off += s

    def backward():
        g = np.zeros_like(a.data)
        any_grad = False
        for t, off_, s in zip(outs, offsets, sizes):
            if t.grad is not None:
                g[..., off_:off_ + s] = t.grad
                any_grad = True
        if any_grad:
            _accum(a, g)

    _record((a,), tuple(outs), backward)
    return outs


def select_last(a: Tensor, index: int) -> Tensor:
    out = Tensor(a.data[..., index])

    def backward():
        if out.grad is None:
            return
        g = np.zeros_like(a.data)
        g[..., index] = out.grad
        _accum(a, g)

    _record((a,), (out,), backward)
    return out


# -- linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward():
        if out.grad is None:
            return
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    _record((a, b), (out,), backward)
    return out


def linear(x, weight: Tensor, bias: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """``out[b, o] = bias[o] + sum_i weight[o, i] * mask[o, i] * x[b, i]``.

    Masked weight entries contribute exactly zero to the output and
    receive exactly zero gradient.
    """
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ShapeError(f"linear input must be 2-d, got {x.data.shape}")
    n_out, n_in = weight.data.shape
    if x.data.shape[1] != n_in:
        raise ShapeError(f"linear input dim {x.data.shape[1]} != weight in-dim {n_in}")
    if bias.data.shape != (n_out,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({n_out},)")
    weff = weight.data if mask is None else weight.data * mask
    out = Tensor(x.data @ weff.T + bias.data)

    def backward():
        if out.grad is None:
            return
        g = out.grad
        _accum(x, g @ weff)
        gw = g.T @ x.data
        if mask is not None:
            gw *= mask
        _accum(weight, gw)
        _accum(bias, g.sum(axis=0))

    _record((x, weight, bias), (out,), backward)
    return out


@dataclass
class MaskedLinear:
    """Linear layer whose effective weight is ``weight * mask`` elementwise."""

    weight: Tensor
    bias: Tensor
    mask: np.ndarray | None = None

    def __call__(self, x) -> Tensor:
        return linear(x, self.weight, self.bias, self.mask)


def matmul_masked(layer: MaskedLinear, x) -> Tensor:
    return layer(x)
