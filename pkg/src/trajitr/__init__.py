"""Trajectory-based individualized treatment rules with single-index biosignatures."""

from .basis import BasisSpec, basis_matrix, evaluate_basis, tensor_design, time_design
from .data import PaddedGroup, SubjectRecord, TrialDataset, pad_records
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateIntervalError,
    DomainError,
    EmptyInputError,
    ITRError,
    RankDeficiencyError,
    StratificationError,
    UndefinedValueError,
    UnderIdentifiedError,
)
from .io import ingest_long_csv, write_long_csv
from .mixed import GroupFit, fit_group, gls_fixed_effects, log_likelihood, marginal_covariance
from .optim import NelderMeadOptions, nelder_mead
from .policy import (
    EvalReport,
    FittedITR,
    cross_validate,
    decide,
    decide_many,
    empirical_value,
    evaluate,
    fit_itr,
    ipwe,
    pcd,
    uniform_policy_value,
)
from .signature import (
    Biosignature,
    CovariateMoments,
    EstimationOptions,
    ats_nonparametric,
    ats_parametric,
    estimate_mle,
    estimate_npats,
    estimate_pats,
    fit_signature,
    mle_components,
    normalize_signature,
    npats_objective,
    pats_criterion,
)
from .simulate import (
    MissingnessSpec,
    SimScenario,
    apply_dropout,
    apply_mcar,
    gamma_pair,
    oracle_decisions,
    sample_covariates,
    simulate,
    simulate_nonquadratic,
    simulate_quadratic,
    true_alpha,
)

__all__ = [
    "BasisSpec",
    "basis_matrix",
    "evaluate_basis",
    "tensor_design",
    "time_design",
    "PaddedGroup",
    "SubjectRecord",
    "TrialDataset",
    "pad_records",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "DegenerateIntervalError",
    "DomainError",
    "EmptyInputError",
    "ITRError",
    "RankDeficiencyError",
    "StratificationError",
    "UndefinedValueError",
    "UnderIdentifiedError",
    "ingest_long_csv",
    "write_long_csv",
    "GroupFit",
    "fit_group",
    "gls_fixed_effects",
    "log_likelihood",
    "marginal_covariance",
    "NelderMeadOptions",
    "nelder_mead",
    "EvalReport",
    "FittedITR",
    "cross_validate",
    "decide",
    "decide_many",
    "empirical_value",
    "evaluate",
    "fit_itr",
    "ipwe",
    "pcd",
    "uniform_policy_value",
    "Biosignature",
    "CovariateMoments",
    "EstimationOptions",
    "ats_nonparametric",
    "ats_parametric",
    "estimate_mle",
    "estimate_npats",
    "estimate_pats",
    "fit_signature",
    "mle_components",
    "normalize_signature",
    "npats_objective",
    "pats_criterion",
    "MissingnessSpec",
    "SimScenario",
    "apply_dropout",
    "apply_mcar",
    "gamma_pair",
    "oracle_decisions",
    "sample_covariates",
    "simulate",
    "simulate_nonquadratic",
    "simulate_quadratic",
    "true_alpha",
]

__version__ = "0.1.0"
