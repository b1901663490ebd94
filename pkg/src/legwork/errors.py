"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration: bad ranges, mismatched shapes, unknown keys."""


class NumericsError(ArithmeticError):
    """Non-finite values where finite ones are required; signals an upstream bug."""
