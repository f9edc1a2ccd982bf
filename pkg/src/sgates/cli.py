"""Command-line surface.

Machine-readable JSON goes to stdout (stable key order, so identical flags
give identical bytes); a short human summary goes to stderr. Exit codes:
0 success, 2 usage or input validation, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy

from . import __version__
from .crossfit import (
    TrainerSpec,
    crossfit_het_test,
    crossfit_rank_test,
    crossfit_sigma,
    crossfit_variance,
    run_crossfit,
)
from .data import load_dataset, validate_for_gates
from .errors import ComputationError, GatesError, ParseError, SchemaError, ValidationError
from .estimator import bias_bound, confidence_intervals, gates_analysis
from .grouping import assign_groups
from .hypotests import build_sigma, het_test, rank_test
from .sim import DgpSpec, SimConfig, run_simulation

__all__ = ["AnalysisReport", "main", "build_parser"]

SCHEMA_VERSION = 1

_USAGE_EXIT = 2
_RUNTIME_EXIT = 3


@dataclass(frozen=True)
class AnalysisReport:
    """Structured result of one CLI analysis; serializes deterministically."""

    command: str
    config: dict
    estimates: list = field(default_factory=list)
    tests: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        payload = {"schema_version": SCHEMA_VERSION}
        payload.update(asdict(self))
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "AnalysisReport":
        body = {k: v for k, v in payload.items() if k != "schema_version"}
        return cls(**body)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _versions() -> dict:
    return {"sgates": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def _emit(report: AnalysisReport, out_path: str | None, summary_lines: list[str]) -> None:
    text = report.to_json()
    sys.stdout.write(text + "\n")
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    for line in summary_lines:
        print(line, file=sys.stderr)


def _schema_from_args(args) -> dict:
    schema: dict = {"y": args.y_col, "t": args.t_col}
    if getattr(args, "score_col", None) is not None:
        schema["score"] = args.score_col
    if getattr(args, "x_cols", None):
        schema["x"] = [c.strip() for c in args.x_cols.split(",") if c.strip()]
    return schema


def _group_rows(tau, var, lo, hi, floored) -> list:
    rows = []
    for k in range(len(tau)):
        rows.append(
            {
                "k": k + 1,
                "tau": float(tau[k]),
                "se": float(np.sqrt(var[k])),
                "var": float(var[k]),
                "ci_lo": float(lo[k]),
                "ci_hi": float(hi[k]),
                "var_floored": bool(floored[k]),
            }
        )
    return rows


def _test_dict(result, extra_keys=()) -> dict:
    body = {
        "statistic": float(result.statistic),
        "p_value": float(result.p_value),
        "method": result.method,
        "df_or_mc": int(result.df_or_mc),
    }
    if result.mc_se is not None:
        body["mc_se"] = float(result.mc_se)
    return body


def _load_for_gates(args, need_score: bool, need_x: bool):
    schema = _schema_from_args(args)
    if need_score and "score" not in schema:
        schema["score"] = "score"
    d = load_dataset(args.data, schema)
    if need_score and d.score is None:
        raise SchemaError("this command needs a score column")
    if need_x and d.x is None:
        raise SchemaError("this command needs covariate columns (--x-cols)")
    return d


def _run_gates_pipeline(args, want_het: bool, want_rank: bool):
    d = _load_for_gates(args, need_score=True, need_x=False)
    d = validate_for_gates(d, args.k, trim=args.trim)
    g = assign_groups(d.score, args.k)
    res = gates_analysis(d, g, args.level)
    estimates = _group_rows(
        res.tau_hat, res.var_hat, res.ci_lo, res.ci_hi, res.components.floored
    )
    tests = {}
    repaired = False
    if want_het or want_rank:
        sig = build_sigma(d, g, args.pd_floor)
        repaired = sig.repaired
        if want_het:
            tests["homogeneity"] = _test_dict(het_test(res.tau_hat, res.ate_hat, sig))
        if want_rank:
            tests["rank_consistency"] = _test_dict(
                rank_test(res.tau_hat, res.ate_hat, sig, n_mc=args.n_mc, seed=args.seed)
            )
    config = {
        "data": str(args.data),
        "k": args.k,
        "level": args.level,
        "seed": getattr(args, "seed", None),
        "n_mc": getattr(args, "n_mc", None),
        "trim": args.trim,
        "versions": _versions(),
    }
    extras = {
        "n": d.n,
        "n1": d.n1,
        "n0": d.n0,
        "ate": float(res.ate_hat),
        "cutoffs": [float(c) for c in g.cutoffs],
    }
    flags = {
        "variance_floored": bool(res.components.floored.any()),
        "sigma_repaired": repaired,
    }
    return res, estimates, tests, config, extras, flags


def cmd_gates(args) -> int:
    res, estimates, tests, config, extras, flags = _run_gates_pipeline(
        args, want_het=True, want_rank=True
    )
    report = AnalysisReport(
        command="gates", config=config, estimates=estimates,
        tests=tests, flags=flags, extras=extras,
    )
    summary = [
        f"ate = {res.ate_hat:+.4f}",
        *(
            f"tau_{row['k']} = {row['tau']:+.4f}  "
            f"[{row['ci_lo']:+.4f}, {row['ci_hi']:+.4f}]"
            for row in estimates
        ),
        f"homogeneity p = {tests['homogeneity']['p_value']:.4f}, "
        f"rank-consistency p = {tests['rank_consistency']['p_value']:.4f}",
    ]
    _emit(report, args.out, summary)
    return 0


def cmd_het_test(args) -> int:
    _, estimates, tests, config, extras, flags = _run_gates_pipeline(
        args, want_het=True, want_rank=False
    )
    report = AnalysisReport(
        command="het-test", config=config, estimates=estimates,
        tests=tests, flags=flags, extras=extras,
    )
    body = tests["homogeneity"]
    _emit(report, args.out, [
        f"statistic = {body['statistic']:.4f}, p = {body['p_value']:.4f}"
    ])
    return 0


def cmd_rank_test(args) -> int:
    _, estimates, tests, config, extras, flags = _run_gates_pipeline(
        args, want_het=False, want_rank=True
    )
    report = AnalysisReport(
        command="rank-test", config=config, estimates=estimates,
        tests=tests, flags=flags, extras=extras,
    )
    body = tests["rank_consistency"]
    _emit(report, args.out, [
        f"statistic = {body['statistic']:.4f}, p = {body['p_value']:.4f} "
        f"(mc se {body['mc_se']:.4f})"
    ])
    return 0


def cmd_crossfit(args) -> int:
    d = _load_for_gates(args, need_score=False, need_x=True)
    if args.trainer_cmd:
        trainer = TrainerSpec(kind="external-command", command=args.trainer_cmd, seed=args.seed)
    elif args.trainer == "linear":
        trainer = TrainerSpec(kind="linear-tlearner", seed=args.seed)
    else:
        raise ValidationError(f"unknown trainer {args.trainer!r}")
    r = run_crossfit(d, trainer, args.k, args.folds, args.seed)
    var, parts = crossfit_variance(r)
    lo, hi = confidence_intervals(r.pooled_tau, var, args.level)
    sig = crossfit_sigma(r, d, args.pd_floor)
    het = crossfit_het_test(r, sig)
    rank = crossfit_rank_test(r, sig, n_mc=args.n_mc, seed=args.seed)
    estimates = _group_rows(r.pooled_tau, var, lo, hi, parts.floored)
    folds = r.fold_assignment
    report = AnalysisReport(
        command="crossfit",
        config={
            "data": str(args.data),
            "k": args.k,
            "folds": args.folds,
            "level": args.level,
            "seed": args.seed,
            "n_mc": args.n_mc,
            "trainer": trainer.kind,
            "versions": _versions(),
        },
        estimates=estimates,
        tests={
            "homogeneity": _test_dict(het),
            "rank_consistency": _test_dict(rank),
        },
        flags={
            "variance_floored": bool(parts.floored.any()),
            "sigma_repaired": sig.repaired,
        },
        extras={
            "n": d.n,
            "ate": float(r.ate_hat),
            "m": folds.m,
            "m1": folds.m1,
            "m0": folds.m0,
            "per_fold_tau": [[float(v) for v in row] for row in r.per_fold_tau],
            "per_fold_kappa1": [[float(v) for v in row] for row in r.per_fold_kappa1],
            "per_fold_kappa0": [[float(v) for v in row] for row in r.per_fold_kappa0],
        },
    )
    summary = [
        f"ate = {r.ate_hat:+.4f}",
        *(
            f"tau_{row['k']} = {row['tau']:+.4f}  "
            f"[{row['ci_lo']:+.4f}, {row['ci_hi']:+.4f}]"
            for row in estimates
        ),
        f"homogeneity p = {het.p_value:.4f}, rank-consistency p = {rank.p_value:.4f}",
    ]
    _emit(report, args.out, summary)
    return 0


def cmd_simulate(args) -> int:
    dgp = DgpSpec(n=args.n, noise_sd=args.noise_sd, effect_mode=args.mode)
    config = SimConfig(
        dgp=dgp,
        K=args.k,
        trials=args.trials,
        seed=args.seed,
        score=None if args.folds else args.score,
        trainer="linear" if args.folds else None,
        folds=args.folds,
        level=args.level,
        n_mc_tests=args.n_mc,
        threads=args.threads,
    )
    sim_report = run_simulation(config)
    if args.out_csv:
        with open(args.out_csv, "w", encoding="utf-8") as fh:
            fh.write(sim_report.to_csv_text())
    report = AnalysisReport(
        command="simulate",
        config=dict(sim_report.config, versions=_versions()),
        estimates=list(sim_report.estimator_rows),
        tests={row["test"]: row for row in sim_report.test_rows},
        flags={},
        extras={"diagnostics": sim_report.diagnostics},
    )
    summary = [
        f"trials = {sim_report.trials}",
        *(
            f"group {row['group']}: bias {row['bias']:+.4f}, sd {row['sd']:.4f}, "
            f"coverage {row['coverage']:.3f}"
            for row in sim_report.estimator_rows
            if row["bias"] is not None and row["sd"] is not None
        ),
        *(
            f"{row['test']}: rejection {row['rejection_rate']:.3f}, "
            f"median p {row['median_p']:.3f}"
            for row in sim_report.test_rows
        ),
    ]
    _emit(report, args.out, summary)
    return 0


def cmd_bias_bound(args) -> int:
    value = bias_bound(
        n=args.n, K=args.k, k=args.group,
        epsilon=args.epsilon, M_k=args.m_k, M_km1=args.m_km1,
    )
    report = AnalysisReport(
        command="bias-bound",
        config={
            "n": args.n, "k": args.k, "group": args.group,
            "epsilon": args.epsilon, "m_k": args.m_k, "m_km1": args.m_km1,
            "versions": _versions(),
        },
        extras={"bound": value},
    )
    _emit(report, args.out, [f"bias bound = {value:.6g}"])
    return 0


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="input CSV with a header row")
    p.add_argument("--y-col", default="y", help="outcome column name")
    p.add_argument("--t-col", default="t", help="treatment column name")
    p.add_argument("--score-col", default=None, help="score column name")
    p.add_argument("--x-cols", default=None, help="comma-separated covariate columns")


def _add_common_analysis_flags(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--k", type=int, required=True, help="number of groups")
    p.add_argument("--level", type=float, default=0.95, help="confidence level")
    p.add_argument("--trim", action="store_true",
                   help="trim trailing units instead of failing on divisibility")
    p.add_argument("--pd-floor", type=float, default=1e-10)
    p.add_argument("--out", default=None, help="also write the JSON report here")
    if seed_required:
        p.add_argument("--seed", type=int, required=True, help="RNG seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgates",
        description="Sorted-group treatment effect estimation, tests and simulation",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gates", help="estimates, intervals and both tests")
    _add_data_flags(p)
    _add_common_analysis_flags(p, seed_required=True)
    p.add_argument("--n-mc", type=int, default=100_000, help="rank-test Monte Carlo draws")
    p.set_defaults(func=cmd_gates)

    p = sub.add_parser("het-test", help="homogeneity test only")
    _add_data_flags(p)
    _add_common_analysis_flags(p, seed_required=False)
    p.set_defaults(func=cmd_het_test)

    p = sub.add_parser("rank-test", help="rank-consistency test only")
    _add_data_flags(p)
    _add_common_analysis_flags(p, seed_required=True)
    p.add_argument("--n-mc", type=int, default=100_000)
    p.set_defaults(func=cmd_rank_test)

    p = sub.add_parser("crossfit", help="cross-fitted estimates and tests")
    _add_data_flags(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--folds", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--n-mc", type=int, default=100_000)
    p.add_argument("--pd-floor", type=float, default=1e-10)
    p.add_argument("--trainer", default="linear", help="built-in trainer name")
    p.add_argument("--trainer-cmd", default=None,
                   help="external trainer command (overrides --trainer)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_crossfit)

    p = sub.add_parser("simulate", help="Monte Carlo calibration harness")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mode", default="heterogeneous",
                   choices=["heterogeneous", "homogeneous"])
    p.add_argument("--noise-sd", type=float, default=1.0)
    p.add_argument("--score", default="x29",
                   help="fixed scoring rule: covariate name or 'cate'")
    p.add_argument("--folds", type=int, default=None,
                   help="cross-fit with the linear trainer instead of a fixed score")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--n-mc", type=int, default=2000, help="per-trial rank-test draws")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out-csv", default=None, help="write the estimator table here")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bias-bound", help="cutoff-estimation bias bound")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True, help="number of groups")
    p.add_argument("--group", type=int, required=True, help="group index in 1..K")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--m-k", type=float, required=True,
                   help="effect bound near the upper cutoff")
    p.add_argument("--m-km1", type=float, required=True,
                   help="effect bound near the lower cutoff")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bias_bound)

    return parser


def _error_report(exc: Exception) -> str:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "error": {"type": type(exc).__name__, "message": str(exc)},
    }
    return json.dumps(payload, sort_keys=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (SchemaError, ValidationError, ParseError, ValueError) as exc:
        sys.stdout.write(_error_report(exc) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_EXIT
    except (ComputationError, GatesError) as exc:
        sys.stdout.write(_error_report(exc) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        return _RUNTIME_EXIT
    except Exception as exc:  # malformed input must not escape as a traceback
        sys.stdout.write(_error_report(exc) + "\n")
        print(f"internal error: {exc}", file=sys.stderr)
        return _RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
