"""Mixup mathematics: pairing, ratio sampling, perturbation layout,
geometric label assignment and the sigmoid-constrained ratio parameter.

Ratios are per pair: a batch of M pairs carries M independent values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .tensor import Tensor, as_tensor, clamp, sigmoid, take

logger = logging.getLogger(__name__)

LAMBDA_MARGIN = 1e-6
# sigma(+-30) keeps kappa + (1 - kappa) * sigma(gamma) strictly inside (kappa, 1) in float64
GAMMA_LIMIT = 30.0
DEGENERATE_VV = 1e-12


@dataclass
class PairBatch:
    x_i: np.ndarray
    y_i: np.ndarray
    x_j: np.ndarray
    y_j: np.ndarray
    perm: np.ndarray

    def __len__(self) -> int:
        return len(self.perm)


def pair_permutation(x, y, rng: np.random.Generator) -> PairBatch:
    """Pair each example with the same minibatch under a uniform permutation.

    Fixed points are allowed; such a pair mixes an example with itself.
    """
    x, y = np.asarray(x), np.asarray(y)
    if len(x) < 1:
        raise ValueError("pair_permutation needs at least one example")
    perm = rng.permutation(len(x))
    return PairBatch(x, y, x[perm], y[perm], perm)


def sample_lambda(alpha: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Plain Beta(alpha, alpha) mixing ratios."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return rng.beta(alpha, alpha, size=n)


def sample_lambda_init(alpha: float, kappa: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Beta(alpha, alpha) draws, redrawing every entry below ``kappa``.

    The result is clamped into [kappa + 1e-6, 1 - 1e-6] so the inverse sigmoid
    map stays finite.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not 0 <= kappa < 1:
        raise ValueError("kappa must lie in [0, 1)")
    lam = rng.beta(alpha, alpha, size=n)
    low = lam < kappa
    while np.any(low):
        lam[low] = rng.beta(alpha, alpha, size=int(low.sum()))
        low = lam < kappa
    return np.clip(lam, kappa + LAMBDA_MARGIN, 1.0 - LAMBDA_MARGIN)


def gamma_init(lambda_init, kappa: float) -> np.ndarray:
    """Inverse of ``lambda = kappa + (1 - kappa) * sigmoid(gamma)``."""
    lam = np.asarray(lambda_init, dtype=float)
    if np.any(lam <= kappa) or np.any(lam >= 1):
        raise ValueError(f"lambda_init must lie strictly inside ({kappa}, 1)")
    # -log((1-k)/(l-k) - 1) rewritten as log((l-k)/(1-l))
    return np.log((lam - kappa) / (1.0 - lam))


def lambda_from_gamma(gamma, kappa: float):
    """Sigmoid map from the unconstrained parameter into (kappa, 1).

    Works on arrays and on tape tensors.
    """
    if isinstance(gamma, Tensor):
        return kappa + (1.0 - kappa) * sigmoid(gamma)
    g = np.asarray(gamma, dtype=float)
    e = np.exp(-np.abs(g))
    s = np.where(g >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return kappa + (1.0 - kappa) * s


@dataclass
class MixState:
    """Mixing ratios for one batch of pairs.

    If ``gamma`` is set, ``lambda_x`` is derived from it through the sigmoid
    map; ``frozen`` disables the adversarial ratio steps.
    """

    lambda_x: np.ndarray
    lambda_y: np.ndarray
    kappa: float = 0.65
    alpha: float = 0.5
    gamma: np.ndarray | None = None
    frozen: bool = True

    @classmethod
    def fixed(cls, lam, **kw) -> "MixState":
        lam = np.asarray(lam, dtype=float)
        if np.any(lam < 0) or np.any(lam > 1):
            raise ValueError("mixing ratio outside [0, 1]")
        return cls(lambda_x=lam, lambda_y=lam.copy(), **kw)

    @classmethod
    def from_beta(cls, alpha, n, rng, **kw) -> "MixState":
        return cls.fixed(sample_lambda(alpha, n, rng), alpha=alpha, **kw)

    @classmethod
    def from_ratio(cls, alpha, kappa, n, rng, frozen=False) -> "MixState":
        gamma = gamma_init(sample_lambda_init(alpha, kappa, n, rng), kappa)
        lam = lambda_from_gamma(gamma, kappa)
        return cls(lambda_x=lam, lambda_y=lam.copy(), kappa=kappa, alpha=alpha,
                   gamma=gamma, frozen=frozen)

    @property
    def optimizing(self) -> bool:
        return self.gamma is not None and not self.frozen

    def lambda_tensor(self) -> tuple[Tensor, Tensor | None]:
        """Return (lambda_x on the tape, gamma leaf or None)."""
        if self.gamma is None:
            return Tensor(self.lambda_x), None
        leaf = Tensor(self.gamma, requires_grad=self.optimizing)
        return lambda_from_gamma(leaf, self.kappa), (leaf if self.optimizing else None)


def ratio_step(mix: MixState, grad_gamma, eta_gamma: float) -> MixState:
    """Sign-gradient ascent on gamma; lambda_x is recomputed through the sigmoid."""
    if mix.gamma is None:
        raise ValueError("ratio_step needs a sigmoid-parameterized MixState")
    if mix.frozen:
        raise ValueError("ratio_step on a frozen MixState")
    gamma = np.clip(mix.gamma + np.sign(grad_gamma) * eta_gamma, -GAMMA_LIMIT, GAMMA_LIMIT)
    lam = lambda_from_gamma(gamma, mix.kappa)
    return replace(mix, gamma=gamma, lambda_x=lam, lambda_y=lam.copy())


class PerturbationState:
    """The adversarial offsets for a batch of pairs.

    ``independent`` keeps one buffer of 2M rows (first M for the left side,
    last M for the permuted right side); ``shared`` keeps M rows and the right
    side reads them through the pairing permutation.
    """

    def __init__(self, delta: np.ndarray, epsilon, perm: np.ndarray, mode: str = "independent",
                 x_i=None, x_j=None, value_range=None):
        if mode not in ("independent", "shared"):
            raise ValueError(f"unknown perturbation mode {mode!r}")
        m = len(perm)
        expected = 2 * m if mode == "independent" else m
        if len(delta) != expected:
            raise ValueError(f"{mode} mode needs {expected} rows, got {len(delta)}")
        self.mode = mode
        self.perm = np.asarray(perm)
        self.epsilon = epsilon
        self.value_range = value_range
        self._base = None
        if value_range is not None:
            self._base = x_i if mode == "shared" else np.concatenate([x_i, x_j])
        self.leaf = Tensor(project_delta(self._base, delta, epsilon, value_range), requires_grad=True)

    @classmethod
    def init(cls, shape, epsilon, perm, rng, mode="independent", init="uniform",
             x_i=None, x_j=None, value_range=None, partner_rng=None):
        """``shape`` is the per-batch input shape (M, ...).  With ``value_range``
        the perturbed points x + delta are also kept inside that range.

        In independent mode the partner rows are drawn from ``partner_rng``
        when given, so ``rng`` advances exactly as for a single PGD start.
        """
        delta = init_delta(shape, epsilon, rng, init)
        if mode == "independent":
            delta = np.concatenate([delta, init_delta(shape, epsilon, partner_rng or rng, init)])
        return cls(delta, epsilon, perm, mode, x_i, x_j, value_range)

    @property
    def values(self) -> np.ndarray:
        return self.leaf.values

    @property
    def m(self) -> int:
        return len(self.perm)

    def delta_i(self) -> Tensor:
        if self.mode == "shared":
            return self.leaf
        return self.leaf[: self.m]

    def delta_j(self) -> Tensor:
        if self.mode == "shared":
            return take(self.leaf, self.perm)
        return self.leaf[self.m:]

    def delta_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.leaf.values
        if self.mode == "shared":
            return d, d[self.perm]
        return d[: self.m], d[self.m:]

    def step(self, grad: np.ndarray, step_size) -> None:
        """delta <- clamp(delta + sign(grad) * step_size, -eps, eps), on a fresh leaf."""
        delta = project_delta(self._base, self.leaf.values + np.sign(grad) * step_size,
                              self.epsilon, self.value_range)
        self.leaf = Tensor(delta, requires_grad=True)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.leaf.values))) if self.leaf.size else 0.0


def init_delta(shape, epsilon, rng: np.random.Generator, init: str = "uniform") -> np.ndarray:
    """U(-eps, eps) or zero starting perturbation."""
    if init == "zero":
        return np.zeros(shape)
    if init != "uniform":
        raise ValueError(f"unknown init {init!r}")
    return rng.uniform(-1.0, 1.0, size=shape) * epsilon


def project_delta(x, delta, epsilon, value_range=None) -> np.ndarray:
    """Clamp ``delta`` to the eps-box and, optionally, ``x + delta`` to a range."""
    delta = np.clip(delta, -epsilon, epsilon)
    if value_range is not None:
        lo, hi = value_range
        delta = np.clip(np.clip(x + delta, lo, hi) - x, -epsilon, epsilon)
    return delta


def _per_pair(lam, ndim: int):
    lam = as_tensor(lam)
    return lam.reshape((lam.shape[0],) + (1,) * (ndim - 1))


def mix_points(a, b, lam, clamp_range=None) -> Tensor:
    """lam * a + (1 - lam) * b with one ratio per row."""
    a, b = as_tensor(a), as_tensor(b)
    lam_values = as_tensor(lam).values
    if np.any(lam_values < 0) or np.any(lam_values > 1):
        raise ValueError("mixing ratio outside [0, 1]")
    lam_t = _per_pair(lam, a.ndim)
    out = lam_t * a + (1.0 - lam_t) * b
    if clamp_range is not None:
        out = clamp(out, *clamp_range)
    return out


def mix_inputs(pair: PairBatch, pert: PerturbationState | None, lam, clamp_range=None) -> Tensor:
    """x_m' = lam (x_i + delta_i) + (1 - lam)(x_j + delta_j), kept on the tape.

    ``lam`` may be a MixState, an array, or a tape tensor (for gradients to
    the ratio parameter).  ``pert=None`` mixes the clean points.
    """
    if isinstance(lam, MixState):
        lam = lam.lambda_x
    if pert is None:
        return mix_points(pair.x_i, pair.x_j, lam, clamp_range)
    a = as_tensor(pair.x_i) + pert.delta_i()
    b = as_tensor(pair.x_j) + pert.delta_j()
    return mix_points(a, b, lam, clamp_range)


def mix_labels(pair_or_yi, lam, y_j=None):
    """y_m = lam y_i + (1 - lam) y_j.  Returns a Tensor when ``lam`` is one."""
    if isinstance(pair_or_yi, PairBatch):
        y_i, y_j = pair_or_yi.y_i, pair_or_yi.y_j
    else:
        y_i = pair_or_yi
    if isinstance(lam, MixState):
        lam = lam.lambda_y
    if isinstance(lam, Tensor):
        return mix_points(y_i, y_j, lam)
    lam = np.asarray(lam, dtype=float)[:, None]
    y_i, y_j = np.asarray(y_i), np.asarray(y_j)
    return lam * y_i + (1.0 - lam) * y_j


def geometric_label_ratio(x_i, x_j, x_m) -> Tensor:
    """Normalized position of x_m along the segment x_i -> x_j, as lambda_y.

    With v = x_j - x_i and p = x_i - x_m, lambda_y = clamp(1 + p.v / v.v, 0, 1)
    per pair.  Pairs with v.v < 1e-12 get lambda_y = 1.
    """
    x_i, x_j, x_m = as_tensor(x_i), as_tensor(x_j), as_tensor(x_m)
    if not (x_i.shape == x_j.shape == x_m.shape):
        raise ValueError(f"geometric_label_ratio: shapes {x_i.shape}, {x_j.shape}, {x_m.shape}")
    n = x_i.shape[0]
    v = (x_j - x_i).reshape(n, -1)
    p = (x_i - x_m).reshape(n, -1)
    vv = (v * v).sum(axis=1)
    degenerate = vv.values < DEGENERATE_VV
    if np.any(degenerate):
        logger.debug("geometric_label_ratio: %d degenerate pair(s), using 1", int(degenerate.sum()))
    keep = (~degenerate).astype(float)
    safe_vv = vv + degenerate.astype(float)
    ratio = clamp(1.0 + (p * v).sum(axis=1) / safe_vv, 0.0, 1.0)
    return ratio * keep + (1.0 - keep)
