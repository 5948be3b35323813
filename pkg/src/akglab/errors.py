"""Exception types shared across the package.

Each maps to one CLI exit code (see cli.EXIT_CODES).
"""


class ConfigurationError(ValueError):
    """Bad input: wrong grid, invalid parameters, malformed config."""


class GridMismatchError(ConfigurationError):
    """Array shape does not match the grid it is used with."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class SolverError(RuntimeError):
    """An iterative solver did not reach its tolerance."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = history


class NoBoundStateError(SolverError):
    """Ground energy is not negative."""


class GapError(SolverError):
    """Spectral gap fell below the configured floor."""


class AcceptanceFailure(AssertionError):
    """A numerical acceptance check failed."""
