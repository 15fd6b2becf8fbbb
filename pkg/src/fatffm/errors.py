"""Exception hierarchy shared across the package."""


class FatFFMError(Exception):
    """Base class for all package errors."""


class ConfigError(FatFFMError):
    """Invalid configuration, or a model/parameter mismatch."""


class ShapeError(FatFFMError):
    """Operands with non-conforming shapes."""


class DataError(FatFFMError):
    """Bad input data (negative continuous value, index out of range, ...)."""


class ParseError(DataError):
    """Malformed input line; carries the 1-based line number when known."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class MetricError(FatFFMError):
    """Metric undefined for the given inputs (empty, or single-class labels)."""


class NumericsError(FatFFMError):
    """Non-finite value produced by a forward or backward pass."""


class CheckpointError(FatFFMError):
    """Unreadable or corrupted checkpoint file."""


class GradCheckFailure(FatFFMError):
    """An analytic gradient disagreed with finite differences."""
