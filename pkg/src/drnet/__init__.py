"""drnet: a dual-stream matrix-reasoning network with a synthetic puzzle
generator, training harness, and embedding-analysis exporters."""

from .config import ModelConfig, TrainConfig, preset
from .data import MiniRpmSpec, RpmProblem, generate_minirpm, read_rpmx, write_rpmx
from .errors import (
    CheckpointError,
    ConfigurationError,
    DrnetError,
    FormatError,
    GenerationError,
    NumericError,
    UsageError,
)
from .model import DRNet, parameter_counts
from .training import evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "preset",
    "MiniRpmSpec",
    "RpmProblem",
    "generate_minirpm",
    "read_rpmx",
    "write_rpmx",
    "DRNet",
    "parameter_counts",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "DrnetError",
    "ConfigurationError",
    "UsageError",
    "FormatError",
    "GenerationError",
    "CheckpointError",
    "NumericError",
    "__version__",
]
