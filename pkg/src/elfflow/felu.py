"""FELU activation and the one-layer one-dimensional network built on it.

The network is ``g(x) = b2 + sum_i w2[i] * FELU(w1[i] * x + b1[i])``.
Because FELU is piecewise linear/quadratic with a continuous first
derivative, ``g'`` is continuous and piecewise linear, so its exact
supremum over the real line is attained either at one of the 2H
breakpoints ``-b1[i]/w1[i]`` and ``-(1+b1[i])/w1[i]`` or at the two tail
slopes. ``lipschitz_forward`` evaluates all of them by brute force,
which keeps the cost at 2H derivative evaluations of O(H) each.

Units with ``|w1[i]| < 1e-300`` produce no interior breakpoint (their
contribution to ``g'`` is identically zero), so they are excluded from
candidate generation; the explicit tail candidates keep the result
well-defined even when every unit is excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradTape, Tensor, _accum, _record, unary

W1_EXCLUDE = 1e-300
_CAND_CLAMP = 1e30


# -- activations (polymorphic: Tensor -> taped Tensor, array/scalar -> array) --

def _felu_np(x):
    x = np.asarray(x, dtype=np.float64)
    q = np.clip(x, -1.0, 0.0) + 1.0
    return np.where(x > 0.0, x, 0.5 * q * q - 0.5)


def _felu_d1_np(x):
    x = np.asarray(x, dtype=np.float64)
    return np.clip(x + 1.0, 0.0, 1.0)


def _felu_d2_np(x):
    x = np.asarray(x, dtype=np.float64)
    return ((x >= -1.0) & (x <= 0.0)).astype(np.float64)


def _elu_np(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_d1_np(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


def _relu_np(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def _relu_d1_np(x):
    x = np.asarray(x, dtype=np.float64)
    return (x > 0.0).astype(np.float64)


def _dispatch(x, fn, dfn):
    if isinstance(x, Tensor):
        return unary(x, fn, dfn)
    y = fn(x)
    return float(y) if np.ndim(y) == 0 else y


def felu(x):
    """x for x>0, (x+1)^2/2 - 1/2 on [-1, 0], -1/2 below; C^1 everywhere."""
    return _dispatch(x, _felu_np, _felu_d1_np)


def felu_d1(x):
    """First derivative of FELU; at breakpoints the quadratic piece applies."""
    return _dispatch(x, _felu_d1_np, _felu_d2_np)


def felu_d2(x):
    """Second derivative of FELU (1 on the closed middle piece, else 0)."""
    y = _felu_d2_np(x)
    return float(y) if np.ndim(y) == 0 else y


def elu(x):
    return _dispatch(x, _elu_np, _elu_d1_np)


def relu(x):
    return _dispatch(x, _relu_np, _relu_d1_np)


def relu_d1(x):
    # a.e. derivative of relu_d1 is zero, which is what backward sees
    return _dispatch(x, _relu_d1_np, lambda t: np.zeros_like(t))


_ACT = {"felu": (_felu_np, _felu_d1_np), "relu": (_relu_np, _relu_d1_np)}


# -- one-dimensional network ---------------------------------------------------

@dataclass
class ElfParams:
    """Parameters of the one-layer network g; ``activation`` is felu or relu."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float = 0.0
    activation: str = "felu"

    def __post_init__(self):
        self.w1 = np.atleast_1d(np.asarray(self.w1, dtype=np.float64))
        self.b1 = np.atleast_1d(np.asarray(self.b1, dtype=np.float64))
        self.w2 = np.atleast_1d(np.asarray(self.w2, dtype=np.float64))
        self.b2 = float(self.b2)
        if not (self.w1.shape == self.b1.shape == self.w2.shape) or self.w1.ndim != 1:
            raise ValueError("w1, b1, w2 must be 1-d arrays of equal length")
        if self.hidden == 0:
            raise ValueError("hidden size must be >= 1")
        if self.activation not in _ACT:
            raise ValueError(f"unknown activation {self.activation!r}")
        for name in ("w1", "b1", "w2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]


@dataclass
class LipschitzInfo:
    """Exact Lipschitz constant with the candidate that attains it.

    ``argmax_branch`` indexes the candidate list: ``2*i`` and ``2*i + 1``
    are the two breakpoints of unit ``i``; ``2*H`` and ``2*H + 1`` are
    the right and left tail slopes (argmax_point then +-inf).
    """

    constant: float
    argmax_point: float
    argmax_branch: int


def elf_forward(p: ElfParams, x):
    """g(x) for scalar or 1-d array x."""
    act = _ACT[p.activation][0]
    xv = np.asarray(x, dtype=np.float64)
    t = p.w1 * xv[..., None] + p.b1
    y = p.b2 + (p.w2 * act(t)).sum(axis=-1)
    return float(y) if np.ndim(y) == 0 else y


def elf_dx(p: ElfParams, x):
    """dg/dx for scalar or 1-d array x."""
    dact = _ACT[p.activation][1]
    xv = np.asarray(x, dtype=np.float64)
    t = p.w1 * xv[..., None] + p.b1
    y = (p.w2 * p.w1 * dact(t)).sum(axis=-1)
    return float(y) if np.ndim(y) == 0 else y


def elf_lipschitz(p: ElfParams) -> LipschitzInfo:
    """sup_x |g'(x)|, exact, with the attaining candidate."""
    if p.activation == "relu":
        L, x_star, branch, _ = _relu_lip_forward(p.w1[None], p.b1[None], p.w2[None])
    else:
        L, x_star, branch, _ = lipschitz_forward(p.w1[None], p.b1[None], p.w2[None])
    H = p.hidden
    b = int(branch[0])
    if p.activation == "felu" and b >= 2 * H:
        point = np.inf if b == 2 * H else -np.inf
    else:
        point = float(x_star[0])
    return LipschitzInfo(constant=float(L[0]), argmax_point=point, argmax_branch=b)


def elf_normalized(p: ElfParams, kappa: float = 0.99):
    """Scale g so its Lipschitz constant is min(L, kappa).

    Returns ``(g_norm, scale)`` with ``g_norm(x) = scale * g(x)`` and
    ``scale = kappa / max(kappa, L)``.
    """
    if not (0.0 < kappa <= 1.0):
        raise ValueError(f"kappa must be in (0, 1], got {kappa}")
    L = elf_lipschitz(p).constant
    scale = kappa / max(kappa, L)

    def g_norm(x):
        return scale * elf_forward(p, x)

    return g_norm, scale


# -- batched exact Lipschitz (FELU) ---------------------------------------------

def _chunk_size(n_rows: int, hidden: int, budget: int = 1 << 22) -> int:
    return max(1, budget // max(1, n_rows * hidden))


def lipschitz_forward(w1, b1, w2, chunk: int | None = None):
    """Exact |g'| supremum for a batch of FELU networks.

    Inputs are ``[N, H]``; returns ``(L, x_star, branch, sign)`` with
    ``L[n] = sup_x |g_n'(x)|``. ``branch`` follows the
    :class:`LipschitzInfo` indexing; ``sign`` is the sign of ``g'`` at
    the winner (needed by the backward pass). Ties resolve to the lowest
    candidate index.
    """
    w1 = np.asarray(w1, dtype=np.float64)
    b1 = np.asarray(b1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    n, h = w1.shape
    p = w2 * w1

    valid = np.abs(w1) >= W1_EXCLUDE
    with np.errstate(divide="ignore", invalid="ignore"):
        cands = np.concatenate([-b1 / w1, -(1.0 + b1) / w1], axis=1)
    cands[~np.isfinite(cands)] = 0.0
    np.clip(cands, -_CAND_CLAMP, _CAND_CLAMP, out=cands)
    valid2 = np.concatenate([valid, valid], axis=1)

    best = np.full(n, -1.0)
    best_idx = np.zeros(n, dtype=np.int64)
    best_sign = np.zeros(n)
    best_x = np.zeros(n)

    if chunk is None:
        chunk = _chunk_size(n, h)
    for start in range(0, 2 * h, chunk):
        xc = cands[:, start:start + chunk]
        t = w1[:, None, :] * xc[:, :, None]
        t += b1[:, None, :]
        u = np.clip(t + 1.0, 0.0, 1.0, out=t)  # felu_d1, in place
        slopes = np.einsum("nh,nkh->nk", p, u)
        scores = np.abs(slopes)
        scores[~valid2[:, start:start + chunk]] = -1.0
        arg = np.argmax(scores, axis=1)
        rows = np.arange(n)
        val = scores[rows, arg]
        upd = val > best
        best[upd] = val[upd]
        best_idx[upd] = arg[upd] + start
        best_sign[upd] = np.sign(slopes[rows, arg])[upd]
        best_x[upd] = xc[rows, arg][upd]

    tail_pos = np.where(w1 > 0.0, p, 0.0).sum(axis=1)
    tail_neg = np.where(w1 < 0.0, p, 0.0).sum(axis=1)
    for k, tail in enumerate((tail_pos, tail_neg)):
        score = np.abs(tail)
        upd = score > best
        best[upd] = score[upd]
        best_idx[upd] = 2 * h + k
        best_sign[upd] = np.sign(tail)[upd]
        best_x[upd] = 0.0

    np.maximum(best, 0.0, out=best)  # all-excluded rows: L = 0 via tails
    return best, best_x, best_idx, best_sign


def lipschitz_backward(g_out, w1, b1, w2, x_star, branch, sign):
    """Gradient of L through the winning candidate (subgradient at ties).

    For a breakpoint winner at unit i, the candidate location
    ``x* = -(b1[i] + c)/w1[i]`` moves with the parameters, and that path
    is included; the winner's own second-derivative term cancels out of
    the result, so the breakpoint convention never enters.
    """
    n, h = w1.shape
    gs = (g_out * sign)[:, None]
    p = w2 * w1

    is_bp = branch < 2 * h
    dw1 = np.zeros_like(w1)
    db1 = np.zeros_like(b1)
    dw2 = np.zeros_like(w2)

    if np.any(is_bp):
        t = w1 * x_star[:, None] + b1
        u = _felu_d1_np(t)
        v = _felu_d2_np(t)
        q = p * v
        gsb = np.where(is_bp[:, None], gs, 0.0)
        dw2 += gsb * w1 * u
        dw1 += gsb * (w2 * u + q * x_star[:, None])
        db1 += gsb * q
        big_g = (q * w1).sum(axis=1)
        rows = np.nonzero(is_bp)[0]
        units = branch[rows] % h
        w1_win = w1[rows, units]
        coef = g_out[rows] * sign[rows] * big_g[rows]
        # coef vanishes whenever x_star is far enough out to overflow the
        # ratio (all second derivatives are zero there); avoid 0 * inf
        with np.errstate(over="ignore", invalid="ignore"):
            ratio = np.where(coef == 0.0, 0.0, -x_star[rows] / w1_win)
        dw1[rows, units] += coef * ratio
        db1[rows, units] += coef * (-1.0 / w1_win)

    for k, cmp in ((0, np.greater), (1, np.less)):
        rows_t = branch == 2 * h + k
        if np.any(rows_t):
            active = cmp(w1, 0.0)
            gst = np.where(rows_t[:, None], gs, 0.0) * active
            dw2 += gst * w1
            dw1 += gst * w2
    return dw1, db1, dw2


def lipschitz_batch(w1: Tensor, b1: Tensor, w2: Tensor):
    """Taped version of :func:`lipschitz_forward` over ``[N, H]`` tensors.

    Returns ``(L, (x_star, branch, sign))``; the extras are plain arrays
    for monitoring and are not part of the graph.
    """
    L, x_star, branch, sign = lipschitz_forward(w1.data, b1.data, w2.data)
    out = Tensor(L)

    def backward():
        if out.grad is None:
            return
        dw1, db1, dw2 = lipschitz_backward(
            out.grad, w1.data, b1.data, w2.data, x_star, branch, sign)
        _accum(w1, dw1)
        _accum(b1, db1)
        _accum(w2, dw2)

    _record((w1, b1, w2), (out,), backward)
    return out, (x_star, branch, sign)


# -- batched exact Lipschitz (ReLU) ----------------------------------------------

def _relu_lip_forward(w1, b1, w2):
    """Exact |g'| supremum for one-layer ReLU networks.

    g' is piecewise constant with at most H+1 regions; each region is
    probed at a representative point. ``branch`` stores the region index
    and ``x_star`` its representative.
    """
    w1 = np.asarray(w1, dtype=np.float64)
    b1 = np.asarray(b1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    n, h = w1.shape
    p = w2 * w1

    valid = np.abs(w1) >= W1_EXCLUDE
    with np.errstate(divide="ignore", invalid="ignore"):
        bp = np.where(valid, -b1 / w1, np.inf)
    bp = np.clip(bp, -_CAND_CLAMP, _CAND_CLAMP)
    bp_sorted = np.sort(bp, axis=1)
    bp_sorted = np.where(np.isfinite(bp_sorted), bp_sorted, _CAND_CLAMP)
    lo = bp_sorted[:, :1] - 1.0
    hi = bp_sorted[:, -1:] + 1.0
    mids = 0.5 * (bp_sorted[:, :-1] + bp_sorted[:, 1:]) if h > 1 else np.empty((n, 0))
    reps = np.concatenate([lo, mids, hi], axis=1)  # [N, H+1]

    t = w1[:, None, :] * reps[:, :, None] + b1[:, None, :]
    slopes = np.einsum("nh,nkh->nk", p, (t > 0.0).astype(np.float64))
    scores = np.abs(slopes)
    arg = np.argmax(scores, axis=1)
    rows = np.arange(n)
    return scores[rows, arg], reps[rows, arg], arg, np.sign(slopes[rows, arg])


def relu_lipschitz_batch(w1: Tensor, b1: Tensor, w2: Tensor):
    """Taped ReLU Lipschitz: gradient flows through the winning region's
    active set (w1/w2 products); region boundaries carry no gradient."""
    L, x_star, branch, sign = _relu_lip_forward(w1.data, b1.data, w2.data)
    out = Tensor(L)

    def backward():
        if out.grad is None:
            return
        active = (w1.data * x_star[:, None] + b1.data) > 0.0
        gs = (out.grad * sign)[:, None] * active
        _accum(w1, gs * w2.data)
        _accum(w2, gs * w1.data)
        _accum(b1, np.zeros_like(b1.data))

    _record((w1, b1, w2), (out,), backward)
    return out, (x_star, branch, sign)
