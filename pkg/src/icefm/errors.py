"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or inconsistent.

    Messages name the offending field so CLI users can fix their JSON.
    """


class SceneFormatError(ValueError):
    """A scene file is truncated, missing arrays, or violates the data model."""


class MetricsError(ValueError):
    """Invalid input to confusion-matrix accumulation or reporting."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or does not match the expected model."""


class UnsupportedArchitectureError(ValueError):
    """A fine-tuning strategy was requested for a backbone it cannot attach to."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; carries epoch/step diagnostics."""
