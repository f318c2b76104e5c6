"""Exception types raised across the package."""


class ConfigError(ValueError):
    """An architecture, strategy or experiment setting is invalid."""


class ShapeError(ValueError):
    """Tensor shapes do not line up."""


class DegenerateInputError(ValueError):
    """An input has no spatial extent or is otherwise empty."""


class NumericError(ArithmeticError):
    """A loss or logit went non-finite (training has diverged)."""


class IngestionError(OSError):
    """Dataset files are missing or unreadable."""
