"""Exception types shared across the toolkit."""


class SchemaError(ValueError):
    """A CSV file or column mapping does not match the expected schema."""


class DataValidationError(ValueError):
    """Input data violates a contract (non-binary label, bad index, ...)."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or inconsistent."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""
