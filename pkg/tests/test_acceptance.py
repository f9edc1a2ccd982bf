"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances are fixed here, nothing is tuned at runtime. All randomized runs
use seed 0. Criteria 3 and 4 share their simulation runs; criterion 10
estimates its oracle by repeated retraining, which dominates the runtime.
"""

import numpy as np
import pytest

import sgates as sg
from sgates import (
    CovMatrix,
    RngStream,
    assign_groups,
    confidence_intervals,
    estimate_ate,
    estimate_gates,
    estimate_gates_variance,
    isotonic_projection,
    rank_test,
    run_simulation,
)
from sgates.crossfit import train_linear_tlearner
from sgates.sim import DgpSpec, SimConfig, cate_matrix, outcome_mean_matrix, true_gates_oracle

from conftest import D8_SCORES, D8_T, D8_Y, random_dataset
from oracles import brute_gates, brute_variance, lattice_isotonic_objective

SEED = 0
THREADS = 4


def report(num, passed, detail):
    print(f"CRITERION {num:02d}: {'PASS' if passed else 'FAIL'} - {detail}")
    assert passed, f"criterion {num}: {detail}"


def corpus():
    """100 randomized small datasets with n <= 12 and K in {2, 3}."""
    rng = np.random.default_rng(2024)
    cases = []
    while len(cases) < 100:
        K = int(rng.choice([2, 3]))
        n = 4 * K if K == 3 else int(rng.choice([8, 12]))
        cases.append((random_dataset(rng, n=n, K=K), K))
    return cases


def test_criterion_01_oracle_equivalence():
    worst = 0.0
    for d, K in corpus():
        g = assign_groups(d.score, K)
        tau = estimate_gates(d, g)
        var, _ = estimate_gates_variance(d, g)
        ref_tau = np.array(brute_gates(list(d.y), list(d.t), list(d.score), K))
        ref_var = np.array(brute_variance(list(d.y), list(d.t), list(d.score), K))
        ref_ate = float(np.mean(d.y[d.t == 1])) - float(np.mean(d.y[d.t == 0]))
        scale_tau = np.maximum(np.abs(ref_tau), 1.0)
        scale_var = np.maximum(np.abs(ref_var), 1.0)
        worst = max(
            worst,
            float(np.max(np.abs(tau - ref_tau) / scale_tau)),
            float(np.max(np.abs(var - ref_var) / scale_var)),
            abs(estimate_ate(d) - ref_ate) / max(abs(ref_ate), 1.0),
        )
    report(1, worst <= 1e-12, f"worst relative deviation from brute force {worst:.2e}")


def test_criterion_02_algebraic_identity(d8):
    worst = 0.0
    datasets = [(d8, 2)] + corpus()
    for d, K in datasets:
        g = assign_groups(d.score, K)
        tau = estimate_gates(d, g)
        ate = estimate_ate(d)
        worst = max(worst, abs(tau.mean() - ate) / max(abs(ate), 1.0))
    report(2, worst <= 1e-12, f"worst relative identity gap {worst:.2e}")


@pytest.fixture(scope="module")
def coverage_runs():
    out = {}
    for n in (100, 500):
        dgp = DgpSpec(n=n)
        cfg = SimConfig(
            dgp=dgp, K=5, trials=1000, seed=SEED, score="x29",
            run_tests=False, threads=THREADS, oracle_draws=2_000_000,
        )
        out[n] = run_simulation(cfg)
    return out


def test_criterion_03_coverage(coverage_runs):
    lines = []
    ok = True
    for n, rep in coverage_runs.items():
        cov = [row["coverage"] for row in rep.estimator_rows]
        ok = ok and all(0.93 <= c <= 0.97 for c in cov)
        lines.append(f"n={n}: {[round(c, 3) for c in cov]}")
    report(3, ok, "per-group coverage " + "; ".join(lines) + " target [0.93, 0.97]")


def test_criterion_04_bias_smallness(coverage_runs):
    lines = []
    ok = True
    for n, rep in coverage_runs.items():
        ratios = [abs(row["bias"]) / row["sd"] for row in rep.estimator_rows]
        ok = ok and all(r <= 0.10 for r in ratios)
        lines.append(f"n={n}: {[round(r, 3) for r in ratios]}")
    report(4, ok, "per-group |bias|/sd " + "; ".join(lines) + " target <= 0.10")


def test_criterion_05_test_size():
    cfg = SimConfig(
        dgp=DgpSpec(n=500, effect_mode="homogeneous"), K=5, trials=1000,
        seed=SEED, score="x29", n_mc_tests=2000, threads=THREADS,
    )
    rep = run_simulation(cfg)
    rate = [r for r in rep.test_rows if r["test"] == "homogeneity"][0]["rejection_rate"]
    report(5, 0.03 <= rate <= 0.07, f"homogeneity rejection {rate:.4f} target [0.03, 0.07]")


def test_criterion_06_power_trend():
    rates = []
    for n in (100, 500, 2500):
        cfg = SimConfig(
            dgp=DgpSpec(n=n), K=5, trials=500, seed=SEED, score="x29",
            n_mc_tests=2000, threads=THREADS,
        )
        rep = run_simulation(cfg)
        rates.append(
            [r for r in rep.test_rows if r["test"] == "homogeneity"][0]["rejection_rate"]
        )
    ok = rates[0] <= rates[1] <= rates[2]
    report(6, ok, f"homogeneity rejection over n=(100,500,2500): {rates}")


def test_criterion_07_rank_conservatism():
    cfg = SimConfig(
        dgp=DgpSpec(n=500), K=5, trials=500, seed=SEED, score="cate",
        n_mc_tests=2000, threads=THREADS,
    )
    rep = run_simulation(cfg)
    rate = [r for r in rep.test_rows if r["test"] == "rank-consistency"][0][
        "rejection_rate"
    ]
    report(7, rate <= 0.06, f"rank-test rejection {rate:.4f} under ordered truth, target <= 0.06")


def test_criterion_08_chi_bar_analytic():
    res = rank_test(
        np.array([2.0, 1.0]), 0.0, CovMatrix(sigma=np.eye(2)),
        n_mc=100_000, seed=SEED,
    )
    stat_ok = res.statistic == 0.5
    p_ok = abs(res.p_value - 0.2398) <= 3 * res.mc_se
    report(
        8, stat_ok and p_ok,
        f"statistic {res.statistic} (want exactly 0.5), "
        f"p {res.p_value:.4f} vs 0.2398 within 3 mc-se ({3 * res.mc_se:.4f})",
    )


def test_criterion_09_isotonic_oracle():
    rng = np.random.default_rng(SEED)
    worst_gap = 0.0
    ok = True
    for _ in range(1000):
        x = rng.uniform(-2.0, 2.0, size=3)
        mu = isotonic_projection(x)
        ok = ok and (np.diff(mu) >= -1e-12).all()
        obj = float(((mu - x) ** 2).sum())
        lattice = lattice_isotonic_objective(x)
        ok = ok and obj <= lattice + 1e-6
        worst_gap = max(worst_gap, lattice - obj)
        ok = ok and lattice - obj <= 1e-4
    report(
        9, ok,
        f"projection never beaten by the 0.01-lattice optimum by more than 1e-6; "
        f"largest lattice resolution gap {worst_gap:.2e}",
    )


@pytest.fixture(scope="module")
def crossfit_oracle_truth():
    """tau(F, n-m) for the linear trainer at n=500, L=5, by 10^4 retrainings."""
    K, train_n, eval_n = 5, 400, 4000
    total = np.zeros(K)
    reps = 10_000
    for r in range(reps):
        gen = RngStream(SEED, 5_000_000 + r).generator()
        x = gen.standard_normal((train_n, 8))
        t = np.zeros(train_n, dtype=np.int64)
        t[gen.permutation(train_n)[: train_n // 2]] = 1
        y = outcome_mean_matrix(x, t) + gen.standard_normal(train_n)
        scorer = train_linear_tlearner(sg.ExperimentDataset(y=y, t=t, x=x))
        xe = gen.standard_normal((eval_n, 8))
        scores = scorer(xe)
        effects = cate_matrix(xe)
        order = np.argsort(scores, kind="stable")
        per = eval_n // K
        total += [effects[order[k * per : (k + 1) * per]].mean() for k in range(K)]
    return total / reps


def test_criterion_10_crossfit_conservatism(crossfit_oracle_truth):
    cfg = SimConfig(
        dgp=DgpSpec(n=500), K=5, trials=500, seed=SEED, trainer="linear",
        folds=5, run_tests=False, truth=crossfit_oracle_truth, threads=THREADS,
    )
    rep = run_simulation(cfg)
    cov = [row["coverage"] for row in rep.estimator_rows]
    ok = all(c >= 0.94 for c in cov)
    report(
        10, ok,
        f"cross-fit coverage of retraining oracle {[round(c, 3) for c in cov]} target >= 0.94",
    )


def test_criterion_11_single_fold_reduction(d8):
    from sgates.crossfit import crossfit_variance
    from test_crossfit import single_fold_result

    r = single_fold_result(d8, np.array(D8_SCORES), 2)
    var, _ = crossfit_variance(r)
    g = assign_groups(d8.score, 2)
    expected, _ = estimate_gates_variance(d8, g)
    gap = float(np.max(np.abs(var - expected) / expected))
    report(11, gap <= 1e-12, f"pooled-variance expression at L=1 vs fixed-score variance, rel gap {gap:.2e}")


def test_criterion_12_thread_determinism():
    mismatches = []
    base_fixed = dict(
        dgp=DgpSpec(n=100), K=5, trials=100, seed=SEED, score="x29",
        n_mc_tests=2000,
    )
    solo = run_simulation(SimConfig(**base_fixed, threads=1))
    many = run_simulation(SimConfig(**base_fixed, threads=8))
    if solo.to_json_text() != many.to_json_text() or solo.to_csv_text() != many.to_csv_text():
        mismatches.append("fixed-score pipeline")
    base_cf = dict(
        dgp=DgpSpec(n=200), K=5, trials=50, seed=SEED, trainer="linear",
        folds=2, n_mc_tests=2000,
    )
    solo = run_simulation(SimConfig(**base_cf, threads=1))
    many = run_simulation(SimConfig(**base_cf, threads=8))
    if solo.to_json_text() != many.to_json_text():
        mismatches.append("cross-fit pipeline")
    report(
        12, not mismatches,
        "byte-identical reports across 1 vs 8 threads"
        + ("" if not mismatches else f"; mismatches: {mismatches}"),
    )
