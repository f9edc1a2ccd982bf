"""Sorted-group average treatment effects from randomized experiments.

Given any scoring rule over covariates, the package sorts units into K
score-quantile groups, estimates the average treatment effect within each
group with an exact repeated-sampling variance, builds confidence
intervals, and tests effect homogeneity (chi-squared) and rank consistency
(Monte Carlo chi-bar-squared) of the group effects. A cross-fitting layer
accounts for the extra noise of training the scoring rule on the same
experiment, and a simulation harness checks coverage, size and power at
desk scale.
"""

__version__ = "0.1.0"

from .crossfit import (
    CrossFitResult,
    CrossfitVarianceParts,
    LinearScorer,
    TrainerSpec,
    crossfit_het_test,
    crossfit_rank_test,
    crossfit_sigma,
    crossfit_variance,
    run_crossfit,
    score_via_external,
    train_linear_tlearner,
)
from .data import (
    ExperimentDataset,
    FoldAssignment,
    load_dataset,
    save_dataset,
    split_folds,
    validate_for_gates,
)
from .errors import (
    ComputationError,
    GatesError,
    ParseError,
    SchemaError,
    ValidationError,
)
from .estimator import (
    GatesResult,
    VarianceComponents,
    bias_bound,
    confidence_intervals,
    estimate_ate,
    estimate_gates,
    estimate_gates_variance,
    gates_analysis,
)
from .grouping import GroupAssignment, assign_groups, group_indicator
from .hypotests import (
    CovMatrix,
    TestResult,
    build_sigma,
    het_test,
    isotonic_projection,
    nearest_pd,
    rank_test,
)
from .numerics import (
    RngStream,
    chi2_sf,
    least_squares,
    mvn_sample,
    normal_quantile,
    reg_incomplete_beta,
    solve_spd,
)
from .sim import (
    COVARIATE_NAMES,
    DgpSpec,
    SimConfig,
    SimReport,
    acic_outcome_mean,
    cate_matrix,
    generate_trial,
    outcome_mean_matrix,
    run_simulation,
    true_gates_oracle,
)

__all__ = [
    "__version__",
    # data
    "ExperimentDataset", "FoldAssignment", "load_dataset", "save_dataset",
    "split_folds", "validate_for_gates",
    # grouping
    "GroupAssignment", "assign_groups", "group_indicator",
    # estimation
    "GatesResult", "VarianceComponents", "estimate_ate", "estimate_gates",
    "estimate_gates_variance", "confidence_intervals", "bias_bound",
    "gates_analysis",
    # tests
    "CovMatrix", "TestResult", "build_sigma", "het_test",
    "isotonic_projection", "rank_test", "nearest_pd",
    # cross-fitting
    "TrainerSpec", "LinearScorer", "CrossFitResult", "CrossfitVarianceParts",
    "train_linear_tlearner", "score_via_external", "run_crossfit",
    "crossfit_variance", "crossfit_sigma", "crossfit_het_test",
    "crossfit_rank_test",
    # numerics
    "RngStream", "reg_incomplete_beta", "chi2_sf", "normal_quantile",
    "mvn_sample", "solve_spd", "least_squares",
    # simulation
    "COVARIATE_NAMES", "DgpSpec", "SimConfig", "SimReport",
    "acic_outcome_mean", "outcome_mean_matrix", "cate_matrix",
    "generate_trial", "true_gates_oracle", "run_simulation",
    # errors
    "GatesError", "SchemaError", "ValidationError", "ParseError",
    "ComputationError",
]
