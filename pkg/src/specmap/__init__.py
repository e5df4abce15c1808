"""Power spectrum map reconstruction from sparse multi-band measurements."""

from .grid import Grid
from .numerics import (
    ConditioningError,
    DegenerateProblemError,
    InvalidInputError,
    NnlsProblem,
    ObservedMatrix,
    SvtConfig,
    nnls_solve,
    ridge_weighted_ls,
    svd_soft_threshold,
    svt_complete,
)
from .scene import GroundTruth, MeasurementSet, SamplingPlan, SceneConfig, generate_scene
from .solver import Estimate, KernelConfig, SolverConfig, solve

__version__ = "0.1.0"

__all__ = [
    "ConditioningError",
    "DegenerateProblemError",
    "Estimate",
    "Grid",
    "GroundTruth",
    "InvalidInputError",
    "KernelConfig",
    "MeasurementSet",
    "NnlsProblem",
    "ObservedMatrix",
    "SamplingPlan",
    "SceneConfig",
    "SolverConfig",
    "SvtConfig",
    "generate_scene",
    "nnls_solve",
    "ridge_weighted_ls",
    "solve",
    "svd_soft_threshold",
    "svt_complete",
]
