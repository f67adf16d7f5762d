"""Epistemic uncertainty for variational autoencoders from a low-rank
linearized-Laplace posterior: matrix-free curvature, Lanczos bases,
stochastic trace and diagonal estimators, and a desk-scale experiment suite."""

from .errors import ConfigurationError, LoadError, NumericError, OracleRefusal, SlugError, TrainingError

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "LoadError",
    "NumericError",
    "OracleRefusal",
    "SlugError",
    "TrainingError",
]
