"""Exception types shared across the package."""


class FlowRestoreError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowRestoreError, ValueError):
    pass


class GraphError(FlowRestoreError, RuntimeError):
    pass


class NumericalError(FlowRestoreError, ArithmeticError):
    """Raised when a forward value or loss stops being finite."""


class ConfigError(FlowRestoreError, ValueError):
    pass


class FormatError(FlowRestoreError, ValueError):
    """Malformed file contents (image header, checkpoint, manifest)."""
