"""Cross-fitting: rotate folds between training and evaluation, pool the
per-fold group effects, and account for the extra variability induced by
the random split.

The trainer is pluggable. Built in: a linear two-regression scorer (fit the
outcome on covariates separately per arm, score by the difference of fits).
External: any command implementing the train/eval/out CSV protocol. Both
must be deterministic given (training data, seed); anything callable with
the signature (train_dataset, seed) -> score_function is also accepted.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import ExperimentDataset, FoldAssignment, save_dataset, split_folds
from .errors import ComputationError, ValidationError
from .estimator import (
    _arm_second_moments,
    _group_kappas,
    estimate_ate,
    estimate_gates,
)
from .grouping import assign_groups
from .hypotests import CovMatrix, TestResult, het_test, nearest_pd, rank_test
from .numerics import DEFAULT_PD_FLOOR, least_squares

__all__ = [
    "TrainerSpec",
    "LinearScorer",
    "CrossFitResult",
    "CrossfitVarianceParts",
    "train_linear_tlearner",
    "score_via_external",
    "run_crossfit",
    "crossfit_variance",
    "crossfit_sigma",
    "crossfit_het_test",
    "crossfit_rank_test",
]

KIND_LINEAR = "linear-tlearner"
KIND_EXTERNAL = "external-command"


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class TrainerSpec:
    """Declarative description of a scoring-rule trainer.

    kind is "linear-tlearner" or "external-command"; external trainers get
    the command line `<command> --train <csv> --eval <csv> --out <csv>
    --seed <u64>` and must write a single-column CSV (header "score"), one
    row per evaluation unit, in evaluation row order.
    """

    kind: str
    command: str | None = None
    seed: int = 0
    timeout: float = 300.0

    def __post_init__(self):
        if self.kind not in (KIND_LINEAR, KIND_EXTERNAL):
            raise ValidationError(f"unknown trainer kind {self.kind!r}")
        if self.kind == KIND_EXTERNAL and not self.command:
            raise ValidationError("external trainer needs a command")


@dataclass(frozen=True)
class LinearScorer:
    """Difference of per-arm least-squares fits; callable on a covariate matrix."""

    coef_1: np.ndarray
    coef_0: np.ndarray
    rank_deficient: bool

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        design = np.column_stack([np.ones(x.shape[0]), x])
        return design @ (self.coef_1 - self.coef_0)


def train_linear_tlearner(train: ExperimentDataset, seed: int = 0) -> LinearScorer:
    """Fit y on (1, x) separately per arm; the score is the fitted
    treated-minus-control difference. Deterministic; the seed is accepted
    for interface uniformity only."""
    if train.x is None:
        raise ValidationError("linear trainer needs a covariate matrix")
    p = train.x.shape[1]
    coefs = {}
    deficient = False
    for arm in (1, 0):
        mask = train.t == arm
        n_arm = int(mask.sum())
        if n_arm <= p + 1:
            raise ComputationError(
                f"arm {arm} has {n_arm} units, need more than {p + 1} to fit"
            )
        design = np.column_stack([np.ones(n_arm), train.x[mask]])
        coefs[arm], flag = least_squares(design, train.y[mask])
        deficient = deficient or flag
    return LinearScorer(coef_1=coefs[1], coef_0=coefs[0], rank_deficient=deficient)


def score_via_external(
    spec: TrainerSpec, train: ExperimentDataset, eval_data: ExperimentDataset
) -> np.ndarray:
    """Run the external trainer protocol and return one score per eval row."""
    if spec.kind != KIND_EXTERNAL:
        raise ValidationError("score_via_external needs an external-command spec")
    with tempfile.TemporaryDirectory(prefix="sgates-trainer-") as tmp:
        tmp_path = Path(tmp)
        train_csv = tmp_path / "train.csv"
        eval_csv = tmp_path / "eval.csv"
        out_csv = tmp_path / "scores.csv"
        save_dataset(train, train_csv)
        save_dataset(eval_data, eval_csv)
        argv = shlex.split(spec.command) + [
            "--train", str(train_csv),
            "--eval", str(eval_csv),
            "--out", str(out_csv),
            "--seed", str(spec.seed % (1 << 64)),
        ]
        try:
            proc = subprocess.run(
                argv, capture_output=True, text=True, timeout=spec.timeout
            )
        except FileNotFoundError as exc:
            raise ComputationError(f"trainer command not found: {argv[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            raise ComputationError(
                f"trainer timed out after {spec.timeout}s: {spec.command}"
            ) from exc
        if proc.returncode != 0:
            raise ComputationError(
                f"trainer exited with status {proc.returncode}: "
                f"{proc.stderr.strip() or '(no stderr)'}"
            )
        if not out_csv.exists():
            raise ComputationError("trainer wrote no output file")
        scores = _read_score_column(out_csv)
    if len(scores) != eval_data.n:
        raise ComputationError(
            f"trainer wrote {len(scores)} scores for {eval_data.n} eval rows"
        )
    return scores


def _read_score_column(path: Path) -> np.ndarray:
    import csv as _csv

    with path.open(newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None or "score" not in [h.strip() for h in header]:
            raise ComputationError("trainer output is missing the 'score' header")
        col = [h.strip() for h in header].index("score")
        values = []
        for i, row in enumerate(reader, start=1):
            try:
                values.append(float(row[col]))
            except (IndexError, ValueError):
                raise ComputationError(
                    f"trainer output has a bad score at data row {i}"
                ) from None
    return np.asarray(values, dtype=float)


@dataclass(frozen=True)
class CrossFitResult:
    """Everything the fold rotation produced.

    per_fold arrays are L x K in fold order; pooled_tau is their fold
    average. e_s2_1/e_s2_0 are the fold-averaged second moments of the
    masked outcomes per arm, s2_fk_raw the across-fold sample variance of
    the fold estimates, and cell_counts the (fold, group, arm) unit counts
    used for precondition checks. var_hat and sigma stay None until
    crossfit_variance / crossfit_sigma fill them in.
    """

    per_fold_tau: np.ndarray
    per_fold_kappa1: np.ndarray
    per_fold_kappa0: np.ndarray
    pooled_tau: np.ndarray
    ate_hat: float
    e_s2_1: np.ndarray
    e_s2_0: np.ndarray
    s2_fk_raw: np.ndarray
    cell_counts: np.ndarray
    per_fold_scores: tuple
    fold_assignment: FoldAssignment
    K: int
    var_hat: np.ndarray | None = None
    var_floored: np.ndarray | None = None
    sigma: CovMatrix | None = None

    def __post_init__(self):
        for name in ("per_fold_tau", "per_fold_kappa1", "per_fold_kappa0",
                     "pooled_tau", "e_s2_1", "e_s2_0", "s2_fk_raw"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "cell_counts", _frozen(self.cell_counts, np.int64))

    @property
    def L(self) -> int:
        return self.fold_assignment.L


@dataclass(frozen=True)
class CrossfitVarianceParts:
    """Intermediates of the pooled-variance formula, kept for reporting:
    the capped across-fold variance estimate, its upper bound, the fold
    moments of the within-group effects, and the zero-floor flags."""

    s2_fk_conservative: np.ndarray
    upper_bound: np.ndarray
    e_kappa1_sq: np.ndarray
    v_kappa1: np.ndarray
    floored: np.ndarray


def _fold_statistics(sub: ExperimentDataset, scores: np.ndarray, K: int):
    """Group effects plus the moment pieces for one fold."""
    g = assign_groups(scores, K)
    tau = estimate_gates(sub, g)
    kappa_1, kappa_0 = _group_kappas(sub, g)
    onehot = (g.group_of[None, :] == np.arange(1, K + 1)[:, None]).astype(float)
    s2_1, s2_0 = _arm_second_moments(sub, onehot * sub.y[None, :])
    treated = sub.t == 1
    counts = np.empty((K, 2), dtype=np.int64)
    for k in range(1, K + 1):
        inside = g.group_of == k
        counts[k - 1, 0] = int((inside & ~treated).sum())
        counts[k - 1, 1] = int((inside & treated).sum())
    return tau, kappa_1, kappa_0, s2_1, s2_0, counts


def run_crossfit(
    d: ExperimentDataset, trainer, K: int, L: int, seed
) -> CrossFitResult:
    """Rotate folds: train on the complement, score and group the held-out
    fold with its own cutoffs, estimate per-fold effects, pool by
    averaging. Deterministic given (dataset, trainer, K, L, seed).
    """
    folds = split_folds(d, L, seed)
    if folds.m1 % K or folds.m0 % K:
        raise ValidationError(
            f"group count K={K} must divide the per-fold arm sizes "
            f"m1={folds.m1}, m0={folds.m0}"
        )
    per_tau = np.empty((L, K))
    per_k1 = np.empty((L, K))
    per_k0 = np.empty((L, K))
    s2_1_sum = np.zeros(K)
    s2_0_sum = np.zeros(K)
    cell_counts = np.empty((L, K, 2), dtype=np.int64)
    fold_scores = []
    for ell in range(1, L + 1):
        members = folds.members(ell)
        sub = d.subset(members)
        train = d.subset(np.flatnonzero(folds.fold_of != ell))
        try:
            scores = _score_fold(trainer, train, sub)
        except Exception as exc:
            raise ComputationError(f"trainer failed on fold {ell}: {exc}") from exc
        if len(scores) != sub.n:
            raise ComputationError(
                f"fold {ell}: trainer produced {len(scores)} scores for {sub.n} units"
            )
        try:
            tau, k1, k0, s2_1, s2_0, counts = _fold_statistics(sub, scores, K)
        except ComputationError as exc:
            raise ComputationError(f"fold {ell}: {exc}") from exc
        per_tau[ell - 1] = tau
        per_k1[ell - 1] = k1
        per_k0[ell - 1] = k0
        s2_1_sum += s2_1
        s2_0_sum += s2_0
        cell_counts[ell - 1] = counts
        fold_scores.append(np.asarray(scores, dtype=float))
    pooled = per_tau.mean(axis=0)
    s2_fk_raw = per_tau.var(axis=0, ddof=1) if L > 1 else np.zeros(K)
    return CrossFitResult(
        per_fold_tau=per_tau,
        per_fold_kappa1=per_k1,
        per_fold_kappa0=per_k0,
        pooled_tau=pooled,
        ate_hat=estimate_ate(d),
        e_s2_1=s2_1_sum / L,
        e_s2_0=s2_0_sum / L,
        s2_fk_raw=s2_fk_raw,
        cell_counts=cell_counts,
        per_fold_scores=tuple(fold_scores),
        fold_assignment=folds,
        K=K,
    )


def _score_fold(trainer, train: ExperimentDataset, eval_data: ExperimentDataset):
    if isinstance(trainer, TrainerSpec):
        if trainer.kind == KIND_EXTERNAL:
            return score_via_external(trainer, train, eval_data)
        scorer = train_linear_tlearner(train, trainer.seed)
        return scorer(eval_data.x)
    # Callable trainer factory: (training data, seed) -> score function.
    scorer = trainer(train, 0)
    return np.asarray(scorer(eval_data.x), dtype=float)


def _require_cells(r: CrossFitResult, minimum: int) -> None:
    short = np.argwhere(r.cell_counts < minimum)
    if len(short):
        ell, k, arm = (int(v) for v in short[0])
        name = "treated" if arm == 1 else "control"
        raise ComputationError(
            f"fold {ell + 1}, group {k + 1} has fewer than {minimum} {name} units"
        )


def _conservative_pieces(r: CrossFitResult) -> CrossfitVarianceParts:
    folds = r.fold_assignment
    K, L = r.K, folds.L
    m, m1, m0 = folds.m, folds.m1, folds.m0
    e_kappa1_sq = (r.per_fold_kappa1**2).mean(axis=0)
    v_kappa1 = r.per_fold_kappa1.var(axis=0, ddof=1) if L > 1 else np.zeros(K)
    upper = (
        K * K * (r.e_s2_1 / m1 + r.e_s2_0 / m0)
        - (K - 1) / (m - 1) * e_kappa1_sq
        + v_kappa1
    )
    s2_cons = np.minimum(r.s2_fk_raw, np.maximum(upper, 0.0))
    return CrossfitVarianceParts(
        s2_fk_conservative=s2_cons,
        upper_bound=upper,
        e_kappa1_sq=e_kappa1_sq,
        v_kappa1=v_kappa1,
        floored=np.zeros(K, dtype=bool),
    )


def crossfit_variance(r: CrossFitResult) -> tuple[np.ndarray, CrossfitVarianceParts]:
    """Pooled-estimator variance, one value per group, floored at zero.

    The across-fold variance of the fold estimates is estimated
    conservatively: the realized value capped by the bound implied by the
    fold-level moments (taken at its positive part).
    """
    _require_cells(r, 2)
    parts = _conservative_pieces(r)
    L = r.fold_assignment.L
    raw = parts.upper_bound - (L - 1) / L * parts.s2_fk_conservative
    floored = raw < 0.0
    var = np.where(floored, 0.0, raw)
    return var, replace(parts, floored=floored)


def crossfit_sigma(
    r: CrossFitResult, d: ExperimentDataset, pd_floor: float = DEFAULT_PD_FLOOR
) -> CovMatrix:
    """Covariance estimate for the centered pooled effects.

    Fold-averaged arm covariances of the centered transforms, minus the
    split-efficiency term (across-fold covariance of the fold estimates,
    conservative on the diagonal), plus the across-fold covariance of the
    within-group effects and the order-K/(m-1) cutoff adjustment.
    Symmetrized, then repaired to positive definite if needed (flagged).
    """
    _require_cells(r, 2)
    folds = r.fold_assignment
    K, L = r.K, folds.L
    if L < 2:
        raise ValidationError("covariance across folds needs L >= 2")
    m, m1, m0 = folds.m, folds.m1, folds.m0
    cov_1 = np.zeros((K, K))
    cov_0 = np.zeros((K, K))
    for ell in range(1, L + 1):
        sub = d.subset(folds.members(ell))
        g = assign_groups(r.per_fold_scores[ell - 1], K)
        onehot = (g.group_of[None, :] == np.arange(1, K + 1)[:, None]).astype(float)
        centered = (onehot - 1.0 / K) * sub.y[None, :]
        treated = sub.t == 1
        cov_1 += np.cov(centered[:, treated], ddof=1)
        cov_0 += np.cov(centered[:, ~treated], ddof=1)
    cov_1 /= L
    cov_0 /= L
    parts = _conservative_pieces(r)
    fold_cov = np.cov(r.per_fold_tau.T, ddof=1)
    fold_cov = fold_cov + np.diag(parts.s2_fk_conservative - np.diag(fold_cov))
    kappa_cov = np.cov(r.per_fold_kappa1.T, ddof=1)
    a_bar = (r.per_fold_kappa1**2 - r.per_fold_kappa1 * r.per_fold_kappa0).mean(axis=0)
    cross_moment = r.per_fold_kappa1.T @ r.per_fold_kappa1 / L
    bracket = a_bar[:, None] + a_bar[None, :] - K * cross_moment
    sigma = (
        K * K * (cov_1 / m1 + cov_0 / m0)
        - (L - 1) / L * fold_cov
        + kappa_cov
        + (K - 1) / (K * (m - 1)) * bracket
    )
    sigma = (sigma + sigma.T) / 2.0
    eigvals = np.linalg.eigvalsh(sigma)
    if eigvals.min() < pd_floor:
        return CovMatrix(sigma=nearest_pd(sigma, pd_floor), repaired=True)
    return CovMatrix(sigma=sigma, repaired=False)


def crossfit_het_test(r: CrossFitResult, sigma: CovMatrix) -> TestResult:
    """Homogeneity test on the pooled effects, centered at the full-sample
    difference in means."""
    return het_test(r.pooled_tau, r.ate_hat, sigma)


def crossfit_rank_test(
    r: CrossFitResult, sigma: CovMatrix, n_mc: int = 100_000, seed=0
) -> TestResult:
    """Rank-consistency test on the pooled effects."""
    return rank_test(r.pooled_tau, r.ate_hat, sigma, n_mc=n_mc, seed=seed)
