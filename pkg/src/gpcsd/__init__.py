"""Gaussian-process current source density estimation from laminar and 2D LFP recordings."""

from .dataset import LfpDataset
from .errors import ConfigurationError, FitError, GpcsdError, NumericalError, ValidationError
from .forward import ElectrodeArray, ForwardOperator, QuadratureGrid
from .gp import log_marginal_likelihood, predict
from .kernels import Hyperparameters
from .optimize import PriorSet, default_priors, fit_map

__version__ = "0.1.0"

__all__ = [
    "LfpDataset",
    "ElectrodeArray",
    "ForwardOperator",
    "QuadratureGrid",
    "Hyperparameters",
    "PriorSet",
    "default_priors",
    "fit_map",
    "log_marginal_likelihood",
    "predict",
    "GpcsdError",
    "ValidationError",
    "ConfigurationError",
    "NumericalError",
    "FitError",
]
