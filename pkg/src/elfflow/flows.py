"""Invertible layers and their composition.

Two layer kinds: an elementwise affine with data-dependent
initialization (ActNorm) and the autoregressive residual layer whose
per-dimension residual is a one-layer FELU network emitted by a masked
hypernetwork. Each per-(sample, dimension) network is normalized by its
exact Lipschitz constant to ``kappa``, which makes the residual map a
per-coordinate contraction: the Jacobian is lower triangular with
diagonal ``1 + scale * g'`` in ``(1 - kappa, 1 + kappa)``, the
log-determinant is the sum of the diagonal logs, and the inverse is a
fixed-point iteration ``x_i = y - scale * g(x_{i-1})`` started at y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .felu import felu, felu_d1, lipschitz_batch, relu, relu_d1, relu_lipschitz_batch
from .made import MadeHypernet
from .tensor import NumericError, Tensor


class InitializationError(ValueError):
    """Data-dependent initialization cannot proceed."""


class ConvergenceError(RuntimeError):
    """Fixed-point inversion did not reach tolerance."""

    def __init__(self, message, residual=None, failed_indices=None):
        super().__init__(message)
        self.residual = residual
        self.failed_indices = failed_indices if failed_indices is not None else []


LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class LayerStats:
    """Per-forward monitoring: Lipschitz constants before normalization."""

    mean_lip: float
    max_lip: float
    frac_normalized: float


class ActNorm:
    """y = exp(log_scale) * x + shift, initialized to standardize a batch."""

    def __init__(self, d: int, trainable: bool = True):
        self.d = int(d)
        self.log_scale = Tensor(np.zeros(d), requires_grad=trainable)
        self.shift = Tensor(np.zeros(d), requires_grad=trainable)
        self.initialized = False

    def init_from_batch(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.d:
            raise T.ShapeError(f"expected [B, {self.d}] batch, got {batch.shape}")
        if batch.shape[0] < 2:
            raise InitializationError("need at least 2 rows to initialize")
        std = batch.std(axis=0)
        bad = np.nonzero(std < 1e-12)[0]
        if bad.size:
            raise InitializationError(
                f"zero-variance dimension(s) {bad.tolist()} in initialization batch")
        self.log_scale.data = -np.log(std)
        self.shift.data = -batch.mean(axis=0) / std
        self.initialized = True

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        b = x.data.shape[0]
        y = T.add(T.mul(x, T.exp(self.log_scale)), self.shift)
        ld_one = T.tsum(self.log_scale)
        logdet = T.mul(ld_one, Tensor(np.ones(b)))
        return y, logdet

    def inverse_np(self, y: np.ndarray) -> np.ndarray:
        return (y - self.shift.data) * np.exp(-self.log_scale.data)

    def parameters(self):
        if not self.log_scale.requires_grad:
            return []
        return [("log_scale", self.log_scale), ("shift", self.shift)]


def actnorm_init(batch: np.ndarray) -> ActNorm:
    layer = ActNorm(np.asarray(batch).shape[1])
    layer.init_from_batch(batch)
    return layer


class ElfArLayer:
    """Residual layer y_t = x_t + scale_t * g_t(x_t), g_t from the hypernet.

    ``scale = kappa / max(kappa, Lip(g))`` per sample and dimension, with
    the exact Lipschitz constant. ``detach_lipschitz`` treats the scale
    as a constant during backward.
    """

    def __init__(self, d: int, hypernet_hidden, elf_hidden: int, kappa: float = 0.99,
                 activation: str = "felu", detach_lipschitz: bool = False, seed: int = 0):
        if not (0.0 < kappa <= 1.0):
            raise ValueError(f"kappa must be in (0, 1], got {kappa}")
        self.d = int(d)
        self.elf_hidden = int(elf_hidden)
        self.kappa = float(kappa)
        self.activation = activation
        self.detach_lipschitz = bool(detach_lipschitz)
        self.hypernet = MadeHypernet(d, hypernet_hidden, elf_hidden, seed=seed)
        self.last_stats: LayerStats | None = None

    def _emit(self, x: Tensor):
        """Hypernet output split into flat [B*d, .] parameter tensors."""
        b = x.data.shape[0]
        h = self.elf_hidden
        raw = self.hypernet.forward(x)
        if not np.all(np.isfinite(raw.data)):
            raise NumericError("non-finite hypernetwork output")
        flat = T.reshape(raw, (b * self.d, 3 * h + 1))
        w1, b1, w2, b2 = T.split_last(flat, (h, h, h, 1))
        return w1, b1, w2, T.reshape(b2, (b * self.d,))

    def _scale(self, w1, b1, w2):
        lip = relu_lipschitz_batch if self.activation == "relu" else lipschitz_batch
        L, _extras = lip(w1, b1, w2)
        self.last_stats = LayerStats(
            mean_lip=float(L.data.mean()),
            max_lip=float(L.data.max()),
            frac_normalized=float((L.data > self.kappa).mean()),
        )
        if self.detach_lipschitz:
            L = T.detach(L)
        denom = T.maximum(L, self.kappa)
        return T.div(self.kappa, denom)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (y, logdet) with logdet[b] = sum_t log(1 + scale*g'_t)."""
        b, d = x.data.shape
        if d != self.d:
            raise T.ShapeError(f"expected [B, {self.d}] input, got {x.data.shape}")
        act, dact = (relu, relu_d1) if self.activation == "relu" else (felu, felu_d1)
        w1, b1, w2, b2 = self._emit(x)
        scale = self._scale(w1, b1, w2)
        xt = T.reshape(x, (b * d, 1))
        t = T.add(T.mul(w1, xt), b1)
        g = T.add(T.tsum(T.mul(w2, act(t)), axis=1), b2)
        gp = T.tsum(T.mul(T.mul(w2, w1), dact(t)), axis=1)
        y = T.add(x, T.reshape(T.mul(scale, g), (b, d)))
        diag = T.add(T.mul(scale, gp), 1.0)
        logdet = T.tsum(T.reshape(T.log(diag), (b, d)), axis=1)
        return y, logdet

    def residual_np(self, x: np.ndarray) -> np.ndarray:
        """scale * g evaluated without recording gradients."""
        b, d = x.shape
        w1, b1, w2, b2 = self._emit(Tensor(x))
        scale = self._scale(w1, b1, w2)
        act = relu if self.activation == "relu" else felu
        t = w1.data * x.reshape(b * d, 1) + b1.data
        g = (w2.data * act(t)).sum(axis=1) + b2.data
        return (scale.data * g).reshape(b, d)

    def invert(self, y: np.ndarray, max_iters: int = 200, tol: float = 1e-8):
        """Solve x + scale*g(x) = y by fixed-point iteration from x0 = y.

        Returns ``(x, iters)`` where x is certified to satisfy
        ``max_abs(x + scale*g(x) - y) <= tol`` and ``iters[b]`` counts
        the residual evaluations sample b needed.
        """
        y = np.asarray(y, dtype=np.float64)
        x = y.copy()
        iters = np.zeros(y.shape[0], dtype=np.int64)
        done = np.zeros(y.shape[0], dtype=bool)
        for i in range(1, max_iters + 1):
            x_new = y - self.residual_np(x)
            disp = np.abs(x_new - x).max(axis=1)
            newly = (disp <= tol) & ~done
            iters[newly] = i
            done |= disp <= tol
            if done.all():
                return x, iters  # x (not x_new) is the certified iterate
            x = x_new
        failed = np.nonzero(~done)[0]
        raise ConvergenceError(
            f"fixed-point inversion: {failed.size} sample(s) above tol={tol} "
            f"after {max_iters} iterations (worst residual {disp.max():.3e})",
            residual=float(disp.max()), failed_indices=failed.tolist())

    def parameters(self):
        return [(f"hypernet.{n}", t) for n, t in self.hypernet.parameters()]


def logdet_bound_check(layer: ElfArLayer, x: np.ndarray) -> bool:
    """Single-layer expansion bound: d*ln(1-kappa) <= logdet <= d*ln(1+kappa)."""
    _, logdet = layer.forward(Tensor(np.asarray(x, dtype=np.float64)))
    d = layer.d
    lo = d * np.log1p(-layer.kappa) if layer.kappa < 1.0 else -np.inf
    hi = d * np.log1p(layer.kappa)
    return bool(np.all(logdet.data >= lo) and np.all(logdet.data <= hi))


class FlowStack:
    """Ordered invertible layers over a standard normal base in R^d."""

    def __init__(self, d: int, layers):
        self.d = int(d)
        self.layers = list(layers)

    @classmethod
    def build(cls, d: int, n_flows: int, hypernet_hidden, elf_hidden: int,
              kappa: float = 0.99, activation: str = "felu",
              detach_lipschitz: bool = False, seed: int = 0) -> "FlowStack":
        """Leading ActNorm, then (ELF-AR, ActNorm) per flow."""
        layers = [ActNorm(d)]
        for k in range(n_flows):
            layers.append(ElfArLayer(
                d, hypernet_hidden, elf_hidden, kappa=kappa, activation=activation,
                detach_lipschitz=detach_lipschitz, seed=seed + 1000 * k))
            layers.append(ActNorm(d))
        return cls(d, layers)

    @property
    def initialized(self) -> bool:
        return all(l.initialized for l in self.layers if isinstance(l, ActNorm))

    def init_actnorms(self, batch: np.ndarray) -> None:
        """Initialize each ActNorm on the batch as transformed so far."""
        x = Tensor(np.asarray(batch, dtype=np.float64))
        for layer in self.layers:
            if isinstance(layer, ActNorm) and not layer.initialized:
                layer.init_from_batch(x.data)
            x, _ = layer.forward(x)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """(z, total logdet), recording on the active tape if any."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        b = x.data.shape[0]
        logdet = Tensor(np.zeros(b))
        for layer in self.layers:
            x, ld = layer.forward(x)
            logdet = T.add(logdet, ld)
        return x, logdet

    def log_prob_t(self, x) -> Tensor:
        z, logdet = self.forward(x)
        base = T.sub(
            T.mul(T.tsum(T.square(z), axis=1), -0.5),
            0.5 * self.d * LOG_2PI)
        return T.add(base, logdet)

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        return self.log_prob_t(Tensor(np.asarray(x, dtype=np.float64))).data

    def invert(self, z: np.ndarray, max_iters: int = 200, tol: float = 1e-8,
               collect_stats: bool = False):
        """Apply inverse layers in reverse order."""
        x = np.asarray(z, dtype=np.float64)
        stats = []
        for layer in reversed(self.layers):
            if isinstance(layer, ActNorm):
                x = layer.inverse_np(x)
            else:
                x, iters = layer.invert(x, max_iters=max_iters, tol=tol)
                stats.append(float(iters.mean()))
        stats.reverse()
        return (x, stats) if collect_stats else x

    def sample(self, n: int, seed: int, max_iters: int = 200, tol: float = 1e-8,
               collect_stats: bool = False):
        z = np.random.default_rng(seed).standard_normal((n, self.d))
        return self.invert(z, max_iters=max_iters, tol=tol, collect_stats=collect_stats)

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = []
        for i, layer in enumerate(self.layers):
            params.extend((f"layers.{i}.{n}", t) for n, t in layer.parameters())
        return params

    def param_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def layer_stats(self) -> list[LayerStats]:
        return [l.last_stats for l in self.layers
                if isinstance(l, ElfArLayer) and l.last_stats is not None]


def stack_log_prob(stack: FlowStack, x) -> np.ndarray:
    return stack.log_prob(x)


def stack_sample(stack: FlowStack, n: int, seed: int, **kw):
    return stack.sample(n, seed, **kw)
