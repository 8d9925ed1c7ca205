"""Exception types shared across the package."""


class MomentlocError(Exception):
    """Base class for all package errors."""


class ShapeError(MomentlocError, ValueError):
    """Tensor dimensions do not line up for the requested op."""


class GeometryError(MomentlocError, ValueError):
    """Temporal geometry is inconsistent (kernel larger than input, bad layer dims, ...)."""


class BatchSizeError(MomentlocError, ValueError):
    """An op needs a larger batch than it was given (batch norm in train mode)."""


class ContractError(MomentlocError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(MomentlocError, ArithmeticError):
    """A non-finite value appeared where the math requires finite ones."""


class UnitError(MomentlocError, ValueError):
    """Two temporal spans use different base-unit durations."""


class ConfigError(MomentlocError, ValueError):
    """Configuration is internally inconsistent (profile vs. params vs. data)."""


class FormatError(MomentlocError, ValueError):
    """A binary container is malformed; message carries the byte offset."""
