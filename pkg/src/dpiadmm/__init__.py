"""Differentially private inexact ADMM for federated multiclass logistic regression."""

from .admm import FeasibleBox, RhoSchedule, Schedules
from .dataio import ConfigError, ParseError, load_config, load_problem
from .federation import (
    Algorithm,
    NumericalError,
    RunConfig,
    RunResult,
    partition_homogeneous,
    run_experiment,
    run_replicas,
)
from .mechanisms import Mechanism, PrivacyConfig, RngStream, compose_epsilon, l1_sensitivity, l2_sensitivity
from .model import AgentData, ProblemDims, ShapeError, global_objective, local_gradient, local_loss, testing_error

__all__ = [
    "AgentData", "Algorithm", "ConfigError", "FeasibleBox", "Mechanism", "NumericalError", "ParseError",
    "PrivacyConfig", "ProblemDims", "RhoSchedule", "RngStream", "RunConfig", "RunResult", "Schedules",
    "ShapeError", "compose_epsilon", "global_objective", "l1_sensitivity", "l2_sensitivity", "load_config",
    "load_problem", "local_gradient", "local_loss", "partition_homogeneous", "run_experiment",
    "run_replicas", "testing_error",
]
