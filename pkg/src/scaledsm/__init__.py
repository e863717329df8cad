"""Scaled subgradient methods for low-rank matrix recovery, plus a benchmark harness."""

from .losses import LossSpec
from .metrics import align, dist, iters_to_tol, relative_error
from .operators import MatrixSensing, QuadraticSampling, make_operator
from .problem import GroundTruth, Observations, make_ground_truth, observe
from .solvers import FactorPair, SolverConfig, SolverTrace, StepSchedule, run

__version__ = "0.1.0"

__all__ = [
    "FactorPair",
    "GroundTruth",
    "LossSpec",
    "MatrixSensing",
    "Observations",
    "QuadraticSampling",
    "SolverConfig",
    "SolverTrace",
    "StepSchedule",
    "align",
    "dist",
    "iters_to_tol",
    "make_ground_truth",
    "make_operator",
    "observe",
    "relative_error",
    "run",
]
