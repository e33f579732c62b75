"""Exception hierarchy shared across the package."""


class SvganError(Exception):
    """Base class for all package errors."""


class ShapeError(SvganError, ValueError):
    """Raised when tensor extents are inconsistent.

    ``dim`` names the offending dimension when it is known.
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class GraphError(SvganError, RuntimeError):
    """Misuse of the differentiation graph (non-scalar loss, reused graph)."""


class NumericError(SvganError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ValidationError(SvganError, ValueError):
    """Invalid configuration or input data."""


class DatasetError(SvganError):
    """Malformed or inconsistent dataset directory."""


class CheckpointError(SvganError):
    """Unreadable, corrupted or mismatched checkpoint file."""
