"""Exception types shared across the package.

Kept deliberately small: callers need to distinguish bad configuration,
bad array shapes, numerically unusable values, and damaged checkpoint
files, because the CLI maps them to different exit codes.
"""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class ShapeError(ValueError):
    """Array arguments have mismatched or disallowed shapes."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class DegenerateLatentError(NumericError):
    """A latent vector has zero norm, so its cosine similarity is undefined."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load/save failures."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint file is truncated or fails its content checksum."""


class CheckpointIncompatibleError(CheckpointError):
    """Checkpoint is valid but does not fit the requested use."""


class UnsupportedLayerError(ValueError):
    """The complexity counter met a layer type it has no rule for."""
