"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ClwfError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ClwfError, ValueError):
    """Operand shapes do not conform to an operation."""


class NumericError(ClwfError, FloatingPointError):
    """A NaN or infinity was produced or supplied."""


class ContractError(ClwfError, ValueError):
    """A precondition on arguments was violated."""


class GraphStateError(ClwfError, RuntimeError):
    """The autodiff tape was used in an invalid state."""


class UnknownTaskError(ClwfError, KeyError):
    """A task id is not registered."""

    def __str__(self) -> str:  # KeyError quotes its argument; keep the message readable
        return str(self.args[0]) if self.args else ""


class DuplicateTaskError(ClwfError, ValueError):
    """A task id is already registered."""


class DegenerateInputError(ClwfError, ValueError):
    """Input is well-formed but degenerate for the requested statistic."""


class UndefinedRateError(ClwfError, ZeroDivisionError):
    """A relative rate was requested against a zero baseline."""

    def __init__(self, message: str, absolute_change: float):
        super().__init__(message)
        self.absolute_change = absolute_change


class FormatError(ClwfError, ValueError):
    """A binary container could not be decoded."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


class CheckpointError(ClwfError, ValueError):
    """A checkpoint directory is inconsistent or incompatible."""


class ConfigError(ClwfError, ValueError):
    """An experiment configuration failed validation."""
