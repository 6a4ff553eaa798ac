"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class InputError(ValueError):
    """Input data is malformed, too short, or otherwise unusable."""


class CheckpointError(ValueError):
    """A checkpoint file is missing, corrupt, or does not describe the expected network."""


class ConfigError(ValueError):
    """Configuration is invalid or inconsistent with a checkpoint."""


class NumericError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class FitError(ValueError):
    """A model or scaler cannot be fitted to the given data."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the inputs (for example zero variance)."""
