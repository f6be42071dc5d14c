"""Exception types shared across the package."""


class SanError(Exception):
    pass


class ShapeError(SanError, ValueError):
    pass


class StateError(SanError, RuntimeError):
    pass


class ConfigError(SanError, ValueError):
    pass


class DataError(SanError, ValueError):
    pass


class NumericError(SanError, FloatingPointError):
    pass


class NormalizationError(NumericError):
    """A vector too close to zero was asked to live on the sphere."""
