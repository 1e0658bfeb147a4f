"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model, distillation, training or experiment configuration."""


class ShapeError(ValueError):
    """Array shapes do not agree with what an operation expects."""


class NumericInputError(ValueError):
    """Non-finite values were passed where finite values are required."""


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class DatasetParseError(ValueError):
    """A dataset file could not be parsed."""


class ValidationError(ValueError):
    """Loaded data violates a domain invariant."""


class CheckpointError(RuntimeError):
    """A checkpoint is truncated, has the wrong version, or does not match the expected model."""


class InsufficientDataError(ValueError):
    """Too few points to fit a scaling curve."""


class TrainingDivergedError(FloatingPointError):
    """The training loss became non-finite."""
