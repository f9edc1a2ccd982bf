"""Joint covariance of the centered group effects and the two tests built
on it: a chi-squared test of effect homogeneity and a Monte Carlo
chi-bar-squared test of rank consistency.

The centered vector c_k = tau_k_hat - tau_hat sums to zero by construction,
so its estimated covariance is structurally near-singular along the
all-ones direction (the centered outcome transforms sum to zero exactly).
Quadratic forms are therefore evaluated through an eigendecomposition that
discards relatively negligible eigenvalues; for a well-conditioned matrix
nothing is discarded and the form equals the plain inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ExperimentDataset
from .errors import ComputationError, ValidationError
from .estimator import _group_kappas
from .grouping import GroupAssignment
from .numerics import DEFAULT_PD_FLOOR, RngStream, chi2_sf, mvn_sample

__all__ = [
    "CovMatrix",
    "TestResult",
    "nearest_pd",
    "build_sigma",
    "het_test",
    "isotonic_projection",
    "rank_test",
]

_EIG_RTOL = 1e-8


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)  # private copy, caller's array untouched
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CovMatrix:
    """K x K covariance estimate plus a flag recording whether a
    positive-definite repair was applied."""

    sigma: np.ndarray
    repaired: bool = False

    def __post_init__(self):
        object.__setattr__(
            self, "sigma", _frozen(self.sigma)
        )

    @property
    def K(self) -> int:
        return self.sigma.shape[0]


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    df_or_mc: int
    method: str
    mc_se: float | None = None


def nearest_pd(a: np.ndarray, pd_floor: float = DEFAULT_PD_FLOOR) -> np.ndarray:
    """Closest positive-definite matrix by spectral clipping.

    Symmetrize, eigendecompose, raise every eigenvalue below pd_floor up to
    pd_floor, reconstruct. Matrices already positive definite with minimum
    eigenvalue >= pd_floor are returned (symmetrized) unchanged, making the
    map a fixed point there.
    """
    if pd_floor <= 0.0:
        raise ValidationError(f"pd_floor must be positive, got {pd_floor}")
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ComputationError("matrix contains non-finite entries")
    sym = (a + a.T) / 2.0
    try:
        w, v = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise ComputationError("eigendecomposition failed") from exc
    if w.min() >= pd_floor:
        return sym
    clipped = np.maximum(w, pd_floor)
    out = (v * clipped) @ v.T
    return (out + out.T) / 2.0


class _QuadForm:
    """Reusable x -> x' Sigma^{-1} x evaluator on the informative eigenspace.

    Eigenvalues below _EIG_RTOL times the largest are dropped; this is the
    pseudo-inverse restricted to the subspace where the centered effect
    vector actually lives.
    """

    def __init__(self, sigma: np.ndarray):
        sigma = np.asarray(sigma, dtype=float)
        if not np.isfinite(sigma).all():
            raise ComputationError("covariance contains non-finite entries")
        sym = (sigma + sigma.T) / 2.0
        try:
            w, v = np.linalg.eigh(sym)
        except np.linalg.LinAlgError as exc:
            raise ComputationError("eigendecomposition failed") from exc
        w_max = w.max() if len(w) else 0.0
        if w_max <= 0.0:
            raise ComputationError("covariance is singular even after repair")
        keep = w >= _EIG_RTOL * w_max
        self._inv_sqrt = v[:, keep] / np.sqrt(w[keep])

    def value(self, vec: np.ndarray) -> float:
        z = vec @ self._inv_sqrt
        return float(z @ z)

    def rows(self, mat: np.ndarray) -> np.ndarray:
        z = mat @ self._inv_sqrt
        return np.einsum("ij,ij->i", z, z)


def build_sigma(
    d: ExperimentDataset, g: GroupAssignment, pd_floor: float = DEFAULT_PD_FLOOR
) -> CovMatrix:
    """Covariance estimate for the centered group-effect vector.

    Uses the centered transforms (1{group = k} - 1/K) y per unit. The two
    arm terms are the per-arm sample covariance matrices of those
    transforms; the order-K/(n-1) adjustment accounts for the estimated
    cutoffs through the inside/outside group effects. The result is
    symmetrized and repaired to positive definite when needed (flagged).
    """
    if g.n != d.n:
        raise ValidationError(
            f"group assignment covers {g.n} units but the dataset has {d.n}"
        )
    K = g.K
    if K < 2:
        raise ValidationError(f"covariance needs at least 2 groups, got K={K}")
    treated = d.t == 1
    for k in range(1, K + 1):
        inside = g.group_of == k
        for arm, mask in (("treated", treated), ("control", ~treated)):
            if int((inside & mask).sum()) < 2:
                raise ComputationError(
                    f"group {k} has fewer than 2 {arm} units; covariance is undefined"
                )
    onehot = (g.group_of[None, :] == np.arange(1, K + 1)[:, None]).astype(float)
    centered = (onehot - 1.0 / K) * d.y[None, :]
    cov_1 = np.cov(centered[:, treated], ddof=1)
    cov_0 = np.cov(centered[:, ~treated], ddof=1)
    kappa_1, kappa_0 = _group_kappas(d, g)
    # Same closed form on and off the diagonal:
    # coef * (A_k + A_k' - K kappa1_k kappa1_k'), A_k = kappa1_k^2 - kappa1_k kappa0_k
    a = kappa_1**2 - kappa_1 * kappa_0
    coef = (K - 1) / (K * (d.n - 1))
    adjustment = coef * (a[:, None] + a[None, :] - K * np.outer(kappa_1, kappa_1))
    sigma = K * K * (cov_1 / d.n1 + cov_0 / d.n0) + adjustment
    sigma = (sigma + sigma.T) / 2.0
    eigvals = np.linalg.eigvalsh(sigma)
    if eigvals.min() < pd_floor:
        return CovMatrix(sigma=nearest_pd(sigma, pd_floor), repaired=True)
    return CovMatrix(sigma=sigma, repaired=False)


def het_test(tau_hat: np.ndarray, ate_hat: float, sigma: CovMatrix) -> TestResult:
    """Chi-squared test of the null that all group effects are equal.

    The statistic is the quadratic form of the centered vector in the
    inverse covariance; the reference distribution has K degrees of
    freedom.
    """
    c = np.asarray(tau_hat, dtype=float) - float(ate_hat)
    K = len(c)
    stat = _QuadForm(sigma.sigma).value(c)
    return TestResult(
        statistic=stat,
        p_value=chi2_sf(stat, K),
        df_or_mc=K,
        method="chi2-homogeneity",
    )


def isotonic_projection(x: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the nondecreasing cone via
    pool-adjacent-violators."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or len(x) == 0:
        raise ValidationError("expected a nonempty 1-d vector")
    means: list[float] = []
    counts: list[int] = []
    for value in x:
        means.append(float(value))
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, c2 = means.pop(), counts.pop()
            m1, c1 = means.pop(), counts.pop()
            counts.append(c1 + c2)
            means.append((m1 * c1 + m2 * c2) / (c1 + c2))
    return np.repeat(means, counts)


def _isotonic_rows(mat: np.ndarray) -> np.ndarray:
    """Row-wise isotonic projection via the minimax identity
    mu_k = max_{i<=k} min_{j>=k} mean(x[i..j]); vectorized over rows."""
    m, k = mat.shape
    prefix = np.zeros((m, k + 1))
    np.cumsum(mat, axis=1, out=prefix[:, 1:])
    lengths = np.arange(k)[None, None, :] - np.arange(k)[None, :, None]  # j - i
    with np.errstate(divide="ignore", invalid="ignore"):
        seg_mean = (prefix[:, 1:][:, None, :] - prefix[:, :-1][:, :, None]) / (
            lengths + 1
        )
    # seg_mean[r, i, j] is only consumed for i <= j; garbage below the
    # diagonal never enters because the scan uses i <= k <= j.
    min_right = np.flip(
        np.minimum.accumulate(np.flip(seg_mean, axis=2), axis=2), axis=2
    )
    max_left = np.maximum.accumulate(min_right, axis=1)
    return max_left[:, np.arange(k), np.arange(k)]


# Default substream for the Monte Carlo calibration when a bare integer
# seed is given; disjoint from the fold-splitting substream.
_RANK_MC_STREAM_ID = 202


def rank_test(
    tau_hat: np.ndarray,
    ate_hat: float,
    sigma: CovMatrix,
    n_mc: int = 100_000,
    seed=0,
) -> TestResult:
    """Monte Carlo chi-bar-squared test of the null that the group effects
    are nondecreasing in k.

    The statistic is the inverse-covariance distance between the centered
    vector and its isotonic projection; it is zero exactly when the vector
    is already nondecreasing, so a rank-consistent estimate never rejects.
    Critical values come from n_mc draws at the least favorable boundary
    (all effects equal), i.e. x ~ N(0, sigma), each reduced the same way.
    """
    if n_mc < 1000:
        raise ValidationError(f"n_mc must be at least 1000, got {n_mc}")
    c = np.asarray(tau_hat, dtype=float) - float(ate_hat)
    quad = _QuadForm(sigma.sigma)
    resid = c - isotonic_projection(c)
    stat = quad.value(resid)
    rng = seed if isinstance(seed, RngStream) else RngStream(seed, _RANK_MC_STREAM_ID)
    draws = mvn_sample(sigma, n_mc, rng)
    mc_stats = quad.rows(draws - _isotonic_rows(draws))
    p = float(np.mean(mc_stats >= stat))
    return TestResult(
        statistic=stat,
        p_value=p,
        df_or_mc=n_mc,
        method="chi-bar-squared-mc",
        mc_se=math.sqrt(max(p * (1.0 - p), 0.0) / n_mc),
    )
