"""Exception hierarchy for the drnet package.

Every error raised on purpose by this package derives from DrnetError so
callers (and the CLI) can distinguish our failures from genuine bugs.
"""


class DrnetError(Exception):
    """Base class for all drnet errors."""


class ConfigurationError(DrnetError):
    """A config value is missing, malformed, or violates a documented constraint."""


class UsageError(DrnetError):
    """Bad command-line arguments or an invalid override expression."""


class FormatError(DrnetError):
    """A serialized artifact (RPMX file, checkpoint, config file) is malformed."""


class GenerationError(DrnetError):
    """The puzzle generator was asked for something it cannot produce."""


class CheckpointError(FormatError):
    """A checkpoint file is unreadable or does not match the receiving model."""


class NumericError(DrnetError):
    """A non-finite value surfaced during training or inference."""
