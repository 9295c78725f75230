"""Stackelberg-Nash hierarchical control of a coupled degenerate parabolic
system: discretization, follower equilibria, penalized leader null control,
Carleman weights and observability probes."""

from .config import RunConfig, parse_config
from .errors import (
    ConfigError, IterationError, NumericError, ParameterError, SNControlError, SolverError,
)
from .problem import Problem, make_problem

__all__ = [
    "ConfigError", "IterationError", "NumericError", "ParameterError", "Problem", "RunConfig",
    "SNControlError", "SolverError", "make_problem", "parse_config",
]
__version__ = "0.1.0"
