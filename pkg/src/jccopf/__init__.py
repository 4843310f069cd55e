"""Joint chance-constrained DC optimal power flow via a smooth sample quantile."""

from .cons import ConstraintSystem, DispatchPoint
from .netcase import GridCase, build_ptdf, builtin_case, load_case, parse_matpower
from .stochastic import ScenarioModel, ScenarioSet, build_covariance, sample

__version__ = "0.1.0"

__all__ = [
    "ConstraintSystem",
    "DispatchPoint",
    "GridCase",
    "ScenarioModel",
    "ScenarioSet",
    "build_covariance",
    "build_ptdf",
    "builtin_case",
    "load_case",
    "parse_matpower",
    "sample",
]
