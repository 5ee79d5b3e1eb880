"""Exception types shared across the package."""


class WeightAugError(Exception):
    """Base class for package errors."""


class ConfigError(WeightAugError, ValueError):
    """Invalid configuration or incompatible shapes."""


class UsageError(WeightAugError, ValueError):
    """A function was called with arguments outside its contract."""


class DataError(WeightAugError, ValueError):
    """Dataset content violates its declared format (e.g. label range)."""


class FormatError(WeightAugError, ValueError):
    """A binary file (dataset or checkpoint) is malformed."""


class NonFiniteLossError(WeightAugError, FloatingPointError):
    """A training step produced a NaN or infinite value."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer
