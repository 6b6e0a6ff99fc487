"""Penalized (Feynman-Kac) Markov flows: exact engine, mixing bounds and checks."""

from .errors import (
    ConfigurationError,
    DegenerateWeights,
    FKCError,
    HypothesisViolation,
    ModelDegeneracy,
    StructuralError,
)
from .measure import Measure, StateSpace, TimeGrid, measure_min, tv_distance
from .semigroup import (
    PenalizedModel,
    backward_weight,
    ctmc_model,
    discrete_chain_model,
    k_operator,
    phi,
    propagate_unnormalized,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DegenerateWeights",
    "FKCError",
    "HypothesisViolation",
    "Measure",
    "ModelDegeneracy",
    "PenalizedModel",
    "StateSpace",
    "StructuralError",
    "TimeGrid",
    "backward_weight",
    "ctmc_model",
    "discrete_chain_model",
    "k_operator",
    "measure_min",
    "phi",
    "propagate_unnormalized",
    "tv_distance",
]
