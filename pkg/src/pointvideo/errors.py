"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of the operands do not line up for the requested operation."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class DataFormatError(ValueError):
    """A binary file violates its declared format (bad magic, truncation, ...)."""


class NumericError(FloatingPointError):
    """A non-finite value was found where the computation requires finite ones."""
