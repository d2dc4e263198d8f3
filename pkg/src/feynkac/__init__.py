"""Deep stochastic solvers for high-dimensional semilinear parabolic PDEs."""

__version__ = "0.1.0"

from .problems import ProblemSpec, allen_cahn_problem, get_problem, hjb_problem, pricing_diffrate_problem  # noqa: E402
from .solvers import METHODS, SolverConfig, TrainingTrace, solve  # noqa: E402
from .tensor_core import RngStream  # noqa: E402

__all__ = [
    "METHODS",
    "ProblemSpec",
    "RngStream",
    "SolverConfig",
    "TrainingTrace",
    "allen_cahn_problem",
    "get_problem",
    "hjb_problem",
    "pricing_diffrate_problem",
    "solve",
]
