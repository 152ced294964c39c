"""Estimation of the two rotation axes of a hinge-pair joint (the human
ankle) from sequences of rotation matrices: single-subject maximum
likelihood, penalized fits under a Gaussian prior, and nonlinear
mixed-effects estimation across subjects, with a Monte Carlo harness."""

__version__ = "0.1.0"

from .errors import (
    ConditioningError,
    ConvergenceError,
    DataError,
    DomainError,
    GimbalLockError,
    HingeAxesError,
    ValidationError,
)
from .rotations import (
    AnatomicalAngles,
    CardanAngles,
    axis_rotation,
    cardan_compose_xzy,
    cardan_decompose_xzy,
    frame_st,
    frame_tt,
    rotation_from_rotvec,
    sample_error_rotation,
    unit_vector_st,
    unit_vector_tt,
)
from .subject import (
    FitOptions,
    SubjectFitResult,
    design_matrix,
    design_vector,
    fit_subject,
    fit_subject_reduced,
    gamma0_from_axes,
    profile_loglik,
    residual_angles,
    residuals,
    score,
    sse,
)
from .penalized import PosteriorResult, PriorSpec, fit_map, posterior_covariance
from .lmm import LmmData, LmmFit, LmmOptions, fit_lmm
from .population import (
    PopulationFit,
    PopulationModel,
    PopulationOptions,
    WaldTest,
    build_pseudo_response,
    fit_population,
    flexibility_statistic,
    flexibility_summary,
    wald_test,
    wald_z,
)
from .simulate import SimConfig, SimReport, run_study, simulate_dataset, simulate_subject
from .dataio import Dataset, lag1_autocorrelation, load_dataset, read_config, write_dataset
from .estimators import PenalizedSubjectAxes, PopulationAxes, SubjectAxes

__all__ = [
    "AnatomicalAngles",
    "CardanAngles",
    "ConditioningError",
    "ConvergenceError",
    "DataError",
    "Dataset",
    "DomainError",
    "FitOptions",
    "GimbalLockError",
    "HingeAxesError",
    "LmmData",
    "LmmFit",
    "LmmOptions",
    "PenalizedSubjectAxes",
    "PopulationAxes",
    "PopulationFit",
    "PopulationModel",
    "PopulationOptions",
    "PosteriorResult",
    "PriorSpec",
    "SimConfig",
    "SimReport",
    "SubjectAxes",
    "SubjectFitResult",
    "ValidationError",
    "WaldTest",
    "axis_rotation",
    "build_pseudo_response",
    "cardan_compose_xzy",
    "cardan_decompose_xzy",
    "design_matrix",
    "design_vector",
    "fit_lmm",
    "fit_map",
    "fit_population",
    "fit_subject",
    "fit_subject_reduced",
    "flexibility_statistic",
    "flexibility_summary",
    "frame_st",
    "frame_tt",
    "gamma0_from_axes",
    "lag1_autocorrelation",
    "load_dataset",
    "posterior_covariance",
    "profile_loglik",
    "read_config",
    "residual_angles",
    "residuals",
    "rotation_from_rotvec",
    "run_study",
    "sample_error_rotation",
    "score",
    "simulate_dataset",
    "simulate_subject",
    "sse",
    "unit_vector_st",
    "unit_vector_tt",
    "wald_test",
    "wald_z",
    "write_dataset",
]
