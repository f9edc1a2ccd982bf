"""Group average treatment effect estimation under a fixed scoring rule.

The estimator for group k rescales the within-group arm sums by K, so that
averaging the K group effects reproduces the overall difference-in-means
exactly. Its repeated-sampling variance has the two usual arm terms plus a
negative correction that accounts for the estimated cutoffs: because each
group is forced to hold exactly n/K units, membership indicators are
negatively correlated across units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ExperimentDataset
from .errors import ComputationError, ValidationError
from .grouping import GroupAssignment
from .numerics import normal_quantile, reg_incomplete_beta

__all__ = [
    "GatesResult",
    "VarianceComponents",
    "estimate_ate",
    "estimate_gates",
    "estimate_gates_variance",
    "confidence_intervals",
    "bias_bound",
    "gates_analysis",
]


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)  # private copy, caller's array untouched
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class VarianceComponents:
    """Sample analogues entering the group-effect variance.

    s2_1/s2_0 are the second-moment estimates of the masked outcomes per
    arm; kappa_1/kappa_0 are the difference-in-means effects inside and
    outside each group. `floored` marks groups where the raw three-term
    variance came out negative and was clipped to zero.
    """

    s2_1: np.ndarray
    s2_0: np.ndarray
    kappa_1: np.ndarray
    kappa_0: np.ndarray
    floored: np.ndarray

    def __post_init__(self):
        for name in ("s2_1", "s2_0", "kappa_1", "kappa_0"):
            object.__setattr__(
                self, name, _frozen(getattr(self, name))
            )
        object.__setattr__(
            self, "floored", _frozen(self.floored, bool)
        )


@dataclass(frozen=True)
class GatesResult:
    """Point estimates, variances and confidence intervals for all K groups."""

    tau_hat: np.ndarray
    var_hat: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    ate_hat: float
    level: float
    components: VarianceComponents | None = None

    def __post_init__(self):
        for name in ("tau_hat", "var_hat", "ci_lo", "ci_hi"):
            object.__setattr__(
                self, name, _frozen(getattr(self, name))
            )

    @property
    def K(self) -> int:
        return len(self.tau_hat)


def estimate_ate(d: ExperimentDataset) -> float:
    """Difference in mean outcomes between the treated and control arms."""
    if d.n1 < 1 or d.n0 < 1:
        raise ValidationError("both arms must contain at least one unit")
    treated = d.t == 1
    return float(d.y[treated].mean() - d.y[~treated].mean())


def _check_alignment(d: ExperimentDataset, g: GroupAssignment) -> None:
    if g.n != d.n:
        raise ValidationError(
            f"group assignment covers {g.n} units but the dataset has {d.n}"
        )


def estimate_gates(d: ExperimentDataset, g: GroupAssignment) -> np.ndarray:
    """Per-group treatment effect estimates, groups ordered by score rank.

    tau_k = (K/n1) sum_i y_i t_i 1{group_i = k}
          - (K/n0) sum_i y_i (1 - t_i) 1{group_i = k}
    """
    _check_alignment(d, g)
    K = g.K
    treated = d.t == 1
    sums_1 = np.bincount(g.group_of[treated], weights=d.y[treated], minlength=K + 1)[1:]
    sums_0 = np.bincount(g.group_of[~treated], weights=d.y[~treated], minlength=K + 1)[1:]
    return K * (sums_1 / d.n1 - sums_0 / d.n0)


def _group_kappas(d: ExperimentDataset, g: GroupAssignment) -> tuple[np.ndarray, np.ndarray]:
    """Difference-in-means effect inside (kappa_1) and outside (kappa_0)
    each group. Raises when a required cell is empty."""
    K = g.K
    kappa_1 = np.empty(K)
    kappa_0 = np.empty(K)
    treated = d.t == 1
    for k in range(1, K + 1):
        inside = g.group_of == k
        for label, mask, out in (("inside", inside, kappa_1), ("outside", ~inside, kappa_0)):
            n_t = int((mask & treated).sum())
            n_c = int((mask & ~treated).sum())
            if n_t < 1 or n_c < 1:
                if label == "outside" and K == 1:
                    out[k - 1] = 0.0  # empty complement; never weighted
                    continue
                arm = "treated" if n_t < 1 else "control"
                raise ComputationError(
                    f"group {k}: no {arm} units {label} the group, "
                    "cannot form the within-group effect"
                )
            out[k - 1] = float(
                d.y[mask & treated].mean() - d.y[mask & ~treated].mean()
            )
    return kappa_1, kappa_0


def _arm_second_moments(
    d: ExperimentDataset, masked: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise sample variances of a (K, n) masked-outcome matrix, one per arm."""
    treated = d.t == 1
    out = []
    for arm_mask, n_t in ((treated, d.n1), (~treated, d.n0)):
        block = masked[:, arm_mask]
        centered = block - block.mean(axis=1, keepdims=True)
        out.append((centered * centered).sum(axis=1) / (n_t - 1))
    return out[0], out[1]


def estimate_gates_variance(
    d: ExperimentDataset, g: GroupAssignment
) -> tuple[np.ndarray, VarianceComponents]:
    """Plug-in variance of each group effect (three-term form, floored at 0).

    Requires at least two treated and two control units in every group so
    the cell moments are defined.
    """
    _check_alignment(d, g)
    K = g.K
    n = d.n
    if d.n1 < 2 or d.n0 < 2:
        raise ComputationError("variance needs at least two units per arm")
    treated = d.t == 1
    for k in range(1, K + 1):
        inside = g.group_of == k
        for arm, mask in (("treated", treated), ("control", ~treated)):
            if int((inside & mask).sum()) < 2:
                raise ComputationError(
                    f"group {k} has fewer than 2 {arm} units; variance is undefined"
                )
    onehot = (g.group_of[None, :] == np.arange(1, K + 1)[:, None]).astype(float)
    masked = onehot * d.y[None, :]
    s2_1, s2_0 = _arm_second_moments(d, masked)
    kappa_1, kappa_0 = _group_kappas(d, g)
    raw = K * K * (s2_1 / d.n1 + s2_0 / d.n0) - (K - 1) / (n - 1) * kappa_1**2
    floored = raw < 0.0
    var_hat = np.where(floored, 0.0, raw)
    return var_hat, VarianceComponents(
        s2_1=s2_1, s2_0=s2_0, kappa_1=kappa_1, kappa_0=kappa_0, floored=floored
    )


def confidence_intervals(
    tau_hat: np.ndarray, var_hat: np.ndarray, level: float
) -> tuple[np.ndarray, np.ndarray]:
    """Normal-quantile intervals tau_k +/- z_{(1+level)/2} sqrt(var_k)."""
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
    tau_hat = np.asarray(tau_hat, dtype=float)
    var_hat = np.asarray(var_hat, dtype=float)
    if (var_hat < 0).any():
        raise ValidationError("variances must be nonnegative")
    z = normal_quantile((1.0 + level) / 2.0)
    half = z * np.sqrt(var_hat)
    return tau_hat - half, tau_hat + half


def _cutoff_tail(q: float, gamma: float, shape: float, scale: float) -> float:
    """P(|B - q| > gamma) for B ~ Beta(shape, scale), with the step-function
    convention at nonpositive shape (degenerate cutoff)."""
    hi = min(1.0, max(0.0, q + gamma))
    lo = min(1.0, max(0.0, q - gamma))
    return 1.0 - reg_incomplete_beta(hi, shape, scale) + reg_incomplete_beta(lo, shape, scale)


def bias_bound(
    n: int, K: int, k: int, epsilon: float, M_k: float, M_km1: float
) -> float:
    """Upper bound on the probability that the conditional bias of the
    group-k estimate exceeds epsilon.

    M_k and M_km1 are user-supplied bounds on the absolute conditional
    effect near the upper and lower group cutoffs; they are not estimable
    from the data, which makes this a diagnostic rather than a correction.
    The bound sums the two cutoff-deviation tails, each a Beta order-
    statistic probability, and is clamped into [0, 1].
    """
    if epsilon <= 0.0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    if M_k <= 0.0 or M_km1 <= 0.0:
        raise ValidationError("effect bounds M must be positive")
    if n < 1 or K < 1 or not 1 <= k <= K:
        raise ValidationError(f"need n >= 1 and 1 <= k <= K, got n={n}, K={K}, k={k}")
    gamma_k = epsilon / (K * M_k)
    gamma_km1 = epsilon / (K * M_km1)
    upper = _cutoff_tail(k / K, gamma_k, n * k / K, n - n * k / K + 1)
    lower = _cutoff_tail((k - 1) / K, gamma_km1, n * (k - 1) / K, n - n * (k - 1) / K + 1)
    return min(1.0, max(0.0, upper + lower))


def gates_analysis(
    d: ExperimentDataset, g: GroupAssignment, level: float = 0.95
) -> GatesResult:
    """Point estimates, variances and intervals bundled into one result."""
    tau_hat = estimate_gates(d, g)
    var_hat, components = estimate_gates_variance(d, g)
    ci_lo, ci_hi = confidence_intervals(tau_hat, var_hat, level)
    return GatesResult(
        tau_hat=tau_hat,
        var_hat=var_hat,
        ci_lo=ci_lo,
        ci_hi=ci_hi,
        ate_hat=estimate_ate(d),
        level=level,
        components=components,
    )
