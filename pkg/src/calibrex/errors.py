"""Exception hierarchy shared by every calibrex module."""


class CalibrexError(Exception):
    """Base class for all calibrex errors."""


class InvalidArgumentError(CalibrexError, ValueError):
    pass


class StateError(CalibrexError, RuntimeError):
    """An object was used before it reached the required state (e.g. unfitted GP)."""


class NumericalError(CalibrexError, ArithmeticError):
    """A factorization or solve broke down.

    ``pivot_index`` is the 0-based order of the failing leading minor and
    ``pivot_value`` the smallest eigenvalue of the offending matrix, when known.
    """

    def __init__(self, message, pivot_index=None, pivot_value=None):
        super().__init__(message)
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value


class InfeasibleLatentError(CalibrexError):
    """No point of the original box maps onto the requested latent point."""


class TrainingError(CalibrexError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class SimulatorError(CalibrexError):
    """A simulator run crashed, timed out or replied with garbage."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SimulatorAbort(CalibrexError):
    """Too many simulator failures for the run to continue."""
