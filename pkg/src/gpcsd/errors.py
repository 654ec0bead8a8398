"""Exception hierarchy shared across the package.

The CLI maps :class:`ValidationError` to exit code 2 and
:class:`NumericalError` (including :class:`FitError`) to exit code 3.
"""


class GpcsdError(Exception):
    """Base class for package errors."""


class ValidationError(GpcsdError, ValueError):
    """Invalid input shapes, values or configuration."""


class ConfigurationError(ValidationError):
    """Inconsistent combination of otherwise valid settings."""


class NumericalError(GpcsdError, ArithmeticError):
    """A factorization, root solve or other numerical step failed."""


class FitError(NumericalError):
    """Every optimizer restart failed; ``restarts`` carries the trajectories."""

    def __init__(self, message, restarts=None):
        super().__init__(message)
        self.restarts = list(restarts or [])
