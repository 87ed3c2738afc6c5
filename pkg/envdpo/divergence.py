"""
Gaussian-kernel MMD between soft-weighted environment samples, its gradient, the
pairwise environment penalty, and total-variation distance.

The MMD estimator is the biased V-statistic with weight-normalized sums, so it
is nonnegative and well defined for the tiny effective sample sizes soft
clustering produces.
"""
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist, pdist

from envdpo.constants import KERNEL_FALLBACK_BANDWIDTH
from envdpo.errors import ConfigError, DimensionError, NormalizationError, ZeroMassError

FIXED = "fixed"
MEDIAN = "median"
BANDWIDTH_RULES = (FIXED, MEDIAN)
SQUARED = "squared"
SQRT = "sqrt"
MMD_FORMS = (SQUARED, SQRT)
TV_TOLERANCE = 1e-6
SQRT_FLOOR = 1e-12


@dataclass
class KernelConfig:
    bandwidth: float = 1.0
    bandwidth_rule: str = MEDIAN

    def __post_init__(self):
        if self.bandwidth_rule not in BANDWIDTH_RULES:
            raise ConfigError(
                f"bandwidth_rule must be one of {BANDWIDTH_RULES}, got "
                f"{self.bandwidth_rule!r}"
            )
        if self.bandwidth_rule == FIXED and not self.bandwidth > 0:
            raise ConfigError(f"fixed bandwidth must be positive, got {self.bandwidth}")

    def sigma_for(self, points: np.ndarray) -> float:
        if self.bandwidth_rule == FIXED:
            return float(self.bandwidth)
        return median_bandwidth(points)


def _as_points(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[:, None]
    return arr


def gaussian_kernel(z, z_other, cfg: KernelConfig) -> float:
    """k(z, z_other) at the configured fixed bandwidth.

    A median bandwidth is a property of a sample, which a single pair does not
    have, so only fixed-rule configs are accepted.
    """
    if cfg.bandwidth_rule != FIXED:
        raise ConfigError(
            f"gaussian_kernel needs a fixed bandwidth, got rule {cfg.bandwidth_rule!r}"
        )
    z = np.atleast_1d(np.asarray(z, dtype=float))
    z_other = np.atleast_1d(np.asarray(z_other, dtype=float))
    if z.shape != z_other.shape:
        raise DimensionError(f"kernel arguments differ in shape: {z.shape} vs {z_other.shape}")
    sigma = float(cfg.bandwidth)
    sq = float(np.sum((z - z_other) ** 2))
    return float(np.exp(-sq / (2.0 * sigma**2)))


def gram(x: np.ndarray, y: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * sigma**2))


def median_bandwidth(points) -> float:
    """Median of the nonzero pairwise distances, or 1.0 for degenerate sets."""
    pts = _as_points(points)
    if len(pts) < 2:
        return KERNEL_FALLBACK_BANDWIDTH
    dists = pdist(pts)
    dists = dists[dists > 0]
    if dists.size == 0:
        return KERNEL_FALLBACK_BANDWIDTH
    return float(np.median(dists))


@dataclass(eq=False)
class EnvSampleSet:
    values: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = _as_points(self.values)
        if self.weights is None:
            self.weights = np.ones(len(self.values))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if len(self.weights) != len(self.values):
            raise DimensionError("one weight per sample is required")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ConfigError("weights must be finite and nonnegative")

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def normalized_weights(self) -> np.ndarray:
        if not self.mass > 0:
            raise ZeroMassError("environment sample set has zero total weight")
        return self.weights / self.mass


def _resolve_sigma(sets: Sequence[EnvSampleSet], cfg: KernelConfig) -> float:
    if cfg.bandwidth_rule == FIXED:
        return float(cfg.bandwidth)
    return median_bandwidth(np.vstack([s.values for s in sets]))


def mmd2_weighted(a: EnvSampleSet, b: EnvSampleSet, cfg: KernelConfig) -> float:
    p, q = a.normalized_weights(), b.normalized_weights()
    sigma = _resolve_sigma((a, b), cfg)
    k_aa = gram(a.values, a.values, sigma)
    k_bb = gram(b.values, b.values, sigma)
    k_ab = gram(a.values, b.values, sigma)
    return float(p @ k_aa @ p + q @ k_bb @ q - 2.0 * p @ k_ab @ q)


def _cross_term_grad(x, y, k, p, q, sigma) -> np.ndarray:
    """d/dx of p^T k(x, y) q, holding y fixed."""
    return -(p[:, None] / sigma**2) * (x * (k @ q)[:, None] - k @ (q[:, None] * y))


def _normalization_pullback(grad_p: np.ndarray, p: np.ndarray, mass: float):
    return (grad_p - p @ grad_p) / mass


@dataclass
class MmdGradient:
    values_a: np.ndarray
    values_b: np.ndarray
    weights_a: np.ndarray
    weights_b: np.ndarray

    def chain(
        self,
        jac_a: Optional[np.ndarray] = None,
        jac_b: Optional[np.ndarray] = None,
        jac_weights_a: Optional[np.ndarray] = None,
        jac_weights_b: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Contract with caller-supplied Jacobians d values / d theta (n, d, P)
        and d weights / d theta (n, P) into a gradient over theta."""
        total = None
        for grad, jac in (
            (self.values_a, jac_a),
            (self.values_b, jac_b),
        ):
            if jac is not None:
                part = np.einsum("nd,ndp->p", grad, np.asarray(jac, dtype=float))
                total = part if total is None else total + part
        for grad, jac in (
            (self.weights_a, jac_weights_a),
            (self.weights_b, jac_weights_b),
        ):
            if jac is not None:
                part = grad @ np.asarray(jac, dtype=float)
                total = part if total is None else total + part
        if total is None:
            raise ConfigError("at least one Jacobian is required")
        return total


def mmd2_grad(a: EnvSampleSet, b: EnvSampleSet, cfg: KernelConfig) -> MmdGradient:
    """Gradient of mmd2_weighted w.r.t. both sample sets' values and raw weights.

    A median-rule bandwidth is treated as a constant of the batch.
    """
    p, q = a.normalized_weights(), b.normalized_weights()
    sigma = _resolve_sigma((a, b), cfg)
    x, y = a.values, b.values
    k_aa, k_bb, k_ab = gram(x, x, sigma), gram(y, y, sigma), gram(x, y, sigma)
    grad_x = 2.0 * _cross_term_grad(x, x, k_aa, p, p, sigma) - 2.0 * _cross_term_grad(
        x, y, k_ab, p, q, sigma
    )
    grad_y = 2.0 * _cross_term_grad(y, y, k_bb, q, q, sigma) - 2.0 * _cross_term_grad(
        y, x, k_ab.T, q, p, sigma
    )
    grad_p = 2.0 * (k_aa @ p) - 2.0 * (k_ab @ q)
    grad_q = 2.0 * (k_bb @ q) - 2.0 * (k_ab.T @ p)
    return MmdGradient(
        values_a=grad_x,
        values_b=grad_y,
        weights_a=_normalization_pullback(grad_p, p, a.mass),
        weights_b=_normalization_pullback(grad_q, q, b.mass),
    )


def _apply_form(value: float, form: str) -> float:
    if form == SQUARED:
        return value
    return float(np.sqrt(max(value, 0.0)))


def _form_derivative(value: float, form: str) -> float:
    if form == SQUARED:
        return 1.0
    # sqrt has no derivative at coinciding environments; treat it as flat there
    return 0.0 if value <= SQRT_FLOOR else 0.5 / np.sqrt(value)


def pairwise_mmd_penalty(
    envs: Sequence[EnvSampleSet], cfg: KernelConfig, form: str = SQUARED
) -> float:
    if form not in MMD_FORMS:
        raise ConfigError(f"mmd form must be one of {MMD_FORMS}, got {form!r}")
    if len(envs) <= 1:
        return 0.0
    if cfg.bandwidth_rule == MEDIAN:
        cfg = KernelConfig(bandwidth=_resolve_sigma(envs, cfg), bandwidth_rule=FIXED)
    return float(
        sum(_apply_form(mmd2_weighted(a, b, cfg), form) for a, b in combinations(envs, 2))
    )


@dataclass
class PenaltyResult:
    value: float
    grad_values: np.ndarray
    grad_weights: np.ndarray
    kernel_evals: int
    pair_values: List[float] = field(default_factory=list)


class SharedSupportMmd:
    """Pairwise MMD penalty for K environments that weight the same B samples.

    Every environment is a reweighting of one batch, so a single B x B Gram
    matrix serves all pairs; `kernel_evals` counts its B^2 entries.
    """

    def __init__(self, sigma: float, form: str = SQUARED):
        if form not in MMD_FORMS:
            raise ConfigError(f"mmd form must be one of {MMD_FORMS}, got {form!r}")
        if not sigma > 0:
            raise ConfigError(f"kernel bandwidth must be positive, got {sigma}")
        self.sigma = float(sigma)
        self.form = form
        self.kernel_evals = 0

    def gram(self, values: np.ndarray) -> np.ndarray:
        values = _as_points(values)
        self.kernel_evals += len(values) ** 2
        return gram(values, values, self.sigma)

    def _normalize(self, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        mass = weights.sum(axis=0)
        if np.any(mass <= 0):
            raise ZeroMassError("an environment received zero total membership")
        return weights / mass, mass

    def value(self, values: np.ndarray, weights: np.ndarray) -> float:
        return self.evaluate(values, weights, with_grad=False).value

    def evaluate(
        self, values: np.ndarray, weights: np.ndarray, with_grad: bool = True
    ) -> PenaltyResult:
        values = _as_points(values)
        weights = np.asarray(weights, dtype=float)
        n_env = weights.shape[1]
        evals_before = self.kernel_evals
        if n_env <= 1:
            return PenaltyResult(
                value=0.0,
                grad_values=np.zeros_like(values),
                grad_weights=np.zeros_like(weights),
                kernel_evals=0,
            )
        k = self.gram(values)
        a, mass = self._normalize(weights)
        total = 0.0
        pair_values = []
        grad_a = np.zeros_like(a)
        grad_k = np.zeros_like(k)
        for m, m_other in combinations(range(n_env), 2):
            d = a[:, m] - a[:, m_other]
            kd = k @ d
            mmd2 = float(d @ kd)
            pair_values.append(mmd2)
            total += _apply_form(mmd2, self.form)
            if with_grad:
                scale = _form_derivative(mmd2, self.form)
                grad_a[:, m] += scale * 2.0 * kd
                grad_a[:, m_other] -= scale * 2.0 * kd
                grad_k += scale * np.outer(d, d)
        grad_values = np.zeros_like(values)
        grad_weights = np.zeros_like(weights)
        if with_grad:
            grad_weights = (grad_a - (grad_a * a).sum(axis=0)) / mass
            g = (grad_k + grad_k.T) * k
            grad_values = -(values * g.sum(axis=1)[:, None] - g @ values) / self.sigma**2
        return PenaltyResult(
            value=float(total),
            grad_values=grad_values,
            grad_weights=grad_weights,
            kernel_evals=self.kernel_evals - evals_before,
            pair_values=pair_values,
        )


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionError(f"distributions differ in length: {p.shape} vs {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if np.any(dist < -TV_TOLERANCE) or abs(dist.sum() - 1.0) > TV_TOLERANCE:
            raise NormalizationError(f"{name} is not a probability vector")
    return float(0.5 * np.abs(p - q).sum())
