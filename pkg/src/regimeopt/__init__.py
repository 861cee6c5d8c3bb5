"""Optimal investment and consumption under a power utility when the
risk-free rate switches regime at a random, intensity-driven time."""

from .dual import DualSolution, NumericalFailure, solve_dual
from .market import MarketModel, ModelError, make_model, reference_model, validate_model
from .simulate import SimConfig
from .strategy import OptimalStrategy, primal_from_dual, primal_value

__all__ = ["DualSolution", "MarketModel", "ModelError", "NumericalFailure", "OptimalStrategy",
           "SimConfig", "make_model", "primal_from_dual", "primal_value", "reference_model",
           "solve_dual", "validate_model"]
__version__ = "0.1.0"
