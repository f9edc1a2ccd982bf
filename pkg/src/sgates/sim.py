"""Synthetic benchmark: a polynomial/indicator outcome model with built-in
effect heterogeneity, oracle group-effect truth by large-sample Monte
Carlo, and a trial loop measuring bias, spread, interval coverage and test
size/power.

The eight covariates the outcome model touches are drawn as independent
standard normals; that substitution means published cell values from the
original competition data are not reproduction targets here, only the
qualitative behavior (coverage near nominal, small bias, rising power).

Homogeneous mode replaces both arms with the control-arm formula and adds
a constant +1 to the treated arm, making the unit-level effect exactly 1;
it exists to calibrate test size, which needs a true null.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .crossfit import (
    TrainerSpec,
    crossfit_het_test,
    crossfit_rank_test,
    crossfit_sigma,
    crossfit_variance,
    run_crossfit,
)
from .data import ExperimentDataset
from .errors import ValidationError
from .estimator import confidence_intervals, gates_analysis
from .grouping import assign_groups
from .hypotests import build_sigma, het_test, rank_test
from .numerics import RngStream

__all__ = [
    "COVARIATE_NAMES",
    "DgpSpec",
    "SimConfig",
    "SimReport",
    "acic_outcome_mean",
    "outcome_mean_matrix",
    "cate_matrix",
    "generate_trial",
    "true_gates_oracle",
    "run_simulation",
]

COVARIATE_NAMES = ("x4", "x17", "x27", "x29", "x30", "x37", "x42", "x54")

HETEROGENEOUS = "heterogeneous"
HOMOGENEOUS = "homogeneous"

# Stream-id layout under one seed: the truth oracle, then three ids per
# trial (data, fold split, test Monte Carlo). Bare-integer seeds elsewhere
# map to ids 101/202, below this range.
_ORACLE_STREAM = 999
_TRIAL_STREAM_BASE = 1000


@dataclass(frozen=True)
class DgpSpec:
    """Synthetic trial design: n units, equal arms, additive Gaussian noise."""

    n: int
    noise_sd: float = 1.0
    effect_mode: str = HETEROGENEOUS

    def __post_init__(self):
        if self.n < 2 or self.n % 2:
            raise ValidationError(f"n must be even and positive, got {self.n}")
        if self.noise_sd < 0:
            raise ValidationError(f"noise_sd must be nonnegative, got {self.noise_sd}")
        if self.effect_mode not in (HETEROGENEOUS, HOMOGENEOUS):
            raise ValidationError(f"unknown effect mode {self.effect_mode!r}")


def _published_mean(x: np.ndarray, treated) -> np.ndarray:
    """The published outcome formula on an (n, 8) covariate matrix."""
    x4, x17, x27, x29, x30, x37, x42, x54 = (x[:, j] for j in range(8))
    t1 = np.asarray(treated, dtype=float)
    t0 = 1.0 - t1
    base = (
        1.60
        + 0.53 * x29
        - 3.80 * x29 * (x29 - 0.98) * (x29 + 0.86)
        - 0.32 * (x17 > 0)
        + 0.21 * (x42 > 0)
        - 0.63 * x27
        + 4.68 * (x27 < -0.61)
        - 0.39 * (x27 + 0.91) * (x27 < -0.91)
        + 0.75 * (x30 <= 0)
        - 1.22 * (x54 <= 0)
        + 0.11 * x37 * (x4 <= 0)
    )
    treated_only = (
        -1.82 * (x42 <= 0)
        + 0.58 * x29
        - 9.42 * x29 * (x29 - 0.67) * (x29 + 0.34)
    )
    control_only = (
        -0.71 * (x17 <= 0)
        + 0.28 * (x30 <= 0)
        + 0.44 * x27
        - 4.87 * (x27 < -0.80)
        - 2.54 * (x54 <= 0)
    )
    return base + t1 * treated_only + t0 * control_only


def outcome_mean_matrix(x: np.ndarray, treated, mode: str = HETEROGENEOUS) -> np.ndarray:
    """Conditional outcome mean per row of an (n, 8) covariate matrix."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != len(COVARIATE_NAMES):
        raise ValidationError(
            f"expected {len(COVARIATE_NAMES)} covariate columns, got {x.shape[1]}"
        )
    if mode == HOMOGENEOUS:
        return _published_mean(x, 0) + np.asarray(treated, dtype=float)
    return _published_mean(x, treated)


def cate_matrix(x: np.ndarray, mode: str = HETEROGENEOUS) -> np.ndarray:
    """Unit-level effect per row; constant 1 in homogeneous mode."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if mode == HOMOGENEOUS:
        return np.ones(x.shape[0])
    return _published_mean(x, 1) - _published_mean(x, 0)


def acic_outcome_mean(x, t: int) -> float:
    """Outcome mean for one covariate record under arm t.

    `x` is a mapping keyed by covariate name or a sequence in
    COVARIATE_NAMES order.
    """
    if t not in (0, 1):
        raise ValidationError(f"arm must be 0 or 1, got {t!r}")
    if isinstance(x, Mapping):
        try:
            row = [float(x[name]) for name in COVARIATE_NAMES]
        except KeyError as exc:
            raise ValidationError(f"missing covariate {exc.args[0]!r}") from None
    else:
        row = [float(v) for v in x]
        if len(row) != len(COVARIATE_NAMES):
            raise ValidationError(
                f"expected {len(COVARIATE_NAMES)} covariates, got {len(row)}"
            )
    return float(_published_mean(np.asarray([row]), t)[0])


def generate_trial(dgp: DgpSpec, rng: RngStream) -> ExperimentDataset:
    """One synthetic sample: standard-normal covariates, exactly n/2
    treated by random permutation, formula mean plus Gaussian noise."""
    gen = rng.generator()
    x = gen.standard_normal((dgp.n, len(COVARIATE_NAMES)))
    t = np.zeros(dgp.n, dtype=np.int64)
    t[gen.permutation(dgp.n)[: dgp.n // 2]] = 1
    mean = outcome_mean_matrix(x, t, dgp.effect_mode)
    y = mean + dgp.noise_sd * gen.standard_normal(dgp.n)
    return ExperimentDataset(y=y, t=t, x=x, x_names=COVARIATE_NAMES)


def true_gates_oracle(
    dgp: DgpSpec,
    score: Callable[[np.ndarray], np.ndarray],
    K: int,
    n_mc: int = 1_000_000,
    rng: RngStream = RngStream(0, _ORACLE_STREAM),
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo truth: mean unit-level effect within each score-quantile
    group, with its standard error, at population scale.

    Returns (tau, mc_se), each length K.
    """
    if n_mc < 100_000:
        raise ValidationError(f"oracle needs n_mc >= 100000, got {n_mc}")
    gen = rng.generator()
    n_use = n_mc - n_mc % K
    x = gen.standard_normal((n_use, len(COVARIATE_NAMES)))
    scores = np.asarray(score(x), dtype=float)
    effects = cate_matrix(x, dgp.effect_mode)
    order = np.argsort(scores, kind="stable")
    per_group = n_use // K
    tau = np.empty(K)
    se = np.empty(K)
    for k in range(K):
        grp = effects[order[k * per_group : (k + 1) * per_group]]
        tau[k] = grp.mean()
        se[k] = grp.std(ddof=1) / np.sqrt(per_group)
    return tau, se


def resolve_score(score) -> Callable[[np.ndarray], np.ndarray]:
    """Accepts a callable, a covariate name, or "cate" (the true effect)."""
    if callable(score):
        return score
    if score == "cate":
        return lambda x: cate_matrix(x, HETEROGENEOUS)
    if score in COVARIATE_NAMES:
        j = COVARIATE_NAMES.index(score)
        return lambda x: np.asarray(x, dtype=float)[:, j]
    raise ValidationError(
        f"score must be callable, 'cate', or one of {COVARIATE_NAMES}, got {score!r}"
    )


@dataclass(frozen=True)
class SimConfig:
    """One simulation study: DGP, estimator configuration and trial loop."""

    dgp: DgpSpec
    K: int
    trials: int
    seed: int
    score: object = None
    trainer: object = None
    folds: int | None = None
    level: float = 0.95
    run_tests: bool = True
    n_mc_tests: int = 2000
    threads: int = 1
    truth: object = None
    oracle_draws: int = 400_000

    def __post_init__(self):
        if self.trials < 1:
            raise ValidationError(f"need at least 1 trial, got {self.trials}")
        if not 0.0 < self.level < 1.0:
            raise ValidationError(f"level must lie in (0, 1), got {self.level}")
        crossfit_mode = self.trainer is not None
        if crossfit_mode and self.folds is None:
            raise ValidationError("a trainer needs a fold count")
        if not crossfit_mode and self.score is None:
            raise ValidationError("need either a fixed score or a trainer with folds")
        if crossfit_mode and self.score is not None:
            raise ValidationError("give a fixed score or a trainer, not both")


@dataclass(frozen=True)
class SimReport:
    """Aggregated study results: one row per group for the estimator table,
    one row per test, plus the configuration echo."""

    estimator_rows: tuple
    test_rows: tuple
    trials: int
    seed: int
    config: dict
    diagnostics: dict

    def to_csv_text(self) -> str:
        header = "group,n,truth,bias,sd,coverage"
        lines = [header]
        for row in self.estimator_rows:
            cells = [str(row["group"]), str(row["n"])]
            for key in ("truth", "bias", "sd", "coverage"):
                value = row[key]
                cells.append("" if value is None else repr(value))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_json_text(self) -> str:
        payload = {
            "estimator_rows": list(self.estimator_rows),
            "test_rows": list(self.test_rows),
            "trials": self.trials,
            "seed": self.seed,
            "config": self.config,
            "diagnostics": self.diagnostics,
        }
        return json.dumps(payload, sort_keys=True)


def _trial_fixed_score(dgp, score_fn, K, level, run_tests, n_mc_tests, seed, index):
    d = generate_trial(dgp, RngStream(seed, _TRIAL_STREAM_BASE + 3 * index))
    g = assign_groups(score_fn(d.x), K)
    res = gates_analysis(d, g, level)
    het_p = rank_p = None
    repaired = False
    if run_tests:
        sig = build_sigma(d, g)
        repaired = sig.repaired
        het_p = het_test(res.tau_hat, res.ate_hat, sig).p_value
        rank_p = rank_test(
            res.tau_hat, res.ate_hat, sig, n_mc=n_mc_tests,
            seed=RngStream(seed, _TRIAL_STREAM_BASE + 3 * index + 2),
        ).p_value
    return (
        res.tau_hat, res.var_hat, res.ci_lo, res.ci_hi,
        het_p, rank_p, bool(res.components.floored.any()), repaired,
    )


def _trial_crossfit(dgp, trainer, K, L, level, run_tests, n_mc_tests, seed, index):
    d = generate_trial(dgp, RngStream(seed, _TRIAL_STREAM_BASE + 3 * index))
    r = run_crossfit(
        d, trainer, K, L, RngStream(seed, _TRIAL_STREAM_BASE + 3 * index + 1)
    )
    var, parts = crossfit_variance(r)
    lo, hi = confidence_intervals(r.pooled_tau, var, level)
    het_p = rank_p = None
    repaired = False
    if run_tests:
        sig = crossfit_sigma(r, d)
        repaired = sig.repaired
        het_p = crossfit_het_test(r, sig).p_value
        rank_p = crossfit_rank_test(
            r, sig, n_mc=n_mc_tests,
            seed=RngStream(seed, _TRIAL_STREAM_BASE + 3 * index + 2),
        ).p_value
    return (
        r.pooled_tau, var, lo, hi,
        het_p, rank_p, bool(parts.floored.any()), repaired,
    )


def run_simulation(config: SimConfig) -> SimReport:
    """Run the trial loop and aggregate.

    Trial i draws from substreams derived from (seed, i) only, so the
    report is identical for any thread count.
    """
    dgp, K = config.dgp, config.K
    crossfit_mode = config.trainer is not None
    if crossfit_mode:
        trainer = (
            TrainerSpec(kind="linear-tlearner")
            if config.trainer == "linear"
            else config.trainer
        )

        def one(i):
            return _trial_crossfit(
                dgp, trainer, K, config.folds, config.level,
                config.run_tests, config.n_mc_tests, config.seed, i,
            )
    else:
        score_fn = resolve_score(config.score)

        def one(i):
            return _trial_fixed_score(
                dgp, score_fn, K, config.level,
                config.run_tests, config.n_mc_tests, config.seed, i,
            )

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(one, range(config.trials)))
    else:
        results = [one(i) for i in range(config.trials)]

    taus = np.stack([r[0] for r in results])
    lows = np.stack([r[2] for r in results])
    highs = np.stack([r[3] for r in results])
    het_ps = np.array([r[4] for r in results], dtype=float)
    rank_ps = np.array([r[5] for r in results], dtype=float)
    floored = sum(int(r[6]) for r in results)
    repaired = sum(int(r[7]) for r in results)

    truth = config.truth
    if truth is None and not crossfit_mode:
        truth, _ = true_gates_oracle(
            dgp, resolve_score(config.score), K,
            n_mc=config.oracle_draws, rng=RngStream(config.seed, _ORACLE_STREAM),
        )
    truth = None if truth is None else np.asarray(truth, dtype=float)

    estimator_rows = []
    for k in range(K):
        row = {
            "group": k + 1,
            "n": dgp.n,
            "truth": None if truth is None else float(truth[k]),
            "bias": None if truth is None else float(taus[:, k].mean() - truth[k]),
            "sd": float(taus[:, k].std(ddof=1)) if config.trials > 1 else None,
            "coverage": None
            if truth is None
            else float(
                ((lows[:, k] <= truth[k]) & (truth[k] <= highs[:, k])).mean()
            ),
        }
        estimator_rows.append(row)

    test_rows = []
    if config.run_tests:
        alpha = 1.0 - config.level
        for name, ps in (("homogeneity", het_ps), ("rank-consistency", rank_ps)):
            test_rows.append(
                {
                    "test": name,
                    "rejection_rate": float((ps < alpha).mean()),
                    "median_p": float(np.median(ps)),
                }
            )

    score_echo = (
        None if crossfit_mode
        else (config.score if isinstance(config.score, str) else "custom")
    )
    trainer_echo = None
    if crossfit_mode:
        trainer_echo = (
            config.trainer.kind if isinstance(config.trainer, TrainerSpec)
            else ("linear" if config.trainer == "linear" else "custom")
        )
    config_echo = {
        "n": dgp.n,
        "noise_sd": dgp.noise_sd,
        "mode": dgp.effect_mode,
        "k": K,
        "folds": config.folds,
        "trials": config.trials,
        "seed": config.seed,
        "level": config.level,
        "score": score_echo,
        "trainer": trainer_echo,
        "n_mc_tests": config.n_mc_tests if config.run_tests else None,
    }
    diagnostics = {
        "variance_floored_trials": floored,
        "sigma_repaired_trials": repaired,
    }
    return SimReport(
        estimator_rows=tuple(estimator_rows),
        test_rows=tuple(test_rows),
        trials=config.trials,
        seed=config.seed,
        config=config_echo,
        diagnostics=diagnostics,
    )
