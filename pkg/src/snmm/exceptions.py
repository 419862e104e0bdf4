"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to, so the command line layer
never has to guess how to report a failure.
"""


class SNMMError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SNMMError, ValueError):
    """Malformed or unknown configuration entries."""

    exit_code = 2


class ValidationError(SNMMError, ValueError):
    """Input data violates a documented invariant (negative outcome, NaN, ...)."""

    exit_code = 3


class StructuralError(SNMMError, KeyError):
    """A referenced entity or feature does not exist."""

    exit_code = 3

    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class PositivityError(SNMMError):
    """The intervention does not vary, so the causal parameter is not identified."""

    exit_code = 3


class InsufficientDataError(SNMMError):
    """Too few rows to fit a nuisance model."""

    exit_code = 3


class CalibrationError(SNMMError):
    """A simulation covariance target cannot be realised."""

    exit_code = 4


class ConvergenceError(SNMMError):
    """An iterative solver did not reach its tolerance."""

    exit_code = 4


class NumericalError(SNMMError, ArithmeticError):
    """Overflow, singular matrices and similar numerical breakdowns."""

    exit_code = 4
