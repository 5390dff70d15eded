"""Exceptions raised by the elto services."""


class EltoError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(EltoError, ValueError):
    """A precondition on the arguments of an operation does not hold."""


class CsvParseError(ArgumentError):
    """A CSV file could not be turned into a time series."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StateMachineError(EltoError):
    """A belief state was passed to an update that expects the other stage."""


class ConsistencyError(EltoError):
    """An internal invariant failed (index range, reconstruction, spot check)."""


class FilterStepError(EltoError):
    """A filter step failed; ``t`` is the time index of the failing step."""

    def __init__(self, t: int, cause: Exception):
        self.t = t
        self.cause = cause
        super().__init__(f"filter step t={t} failed: {cause}")
