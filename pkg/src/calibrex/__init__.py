"""Batch Bayesian optimization for calibrating expensive black-box simulators."""

from calibrex.errors import (
    CalibrexError,
    InfeasibleLatentError,
    InvalidArgumentError,
    NumericalError,
    SimulatorError,
    StateError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrexError",
    "InfeasibleLatentError",
    "InvalidArgumentError",
    "NumericalError",
    "SimulatorError",
    "StateError",
    "TrainingError",
    "__version__",
]
