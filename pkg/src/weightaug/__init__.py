"""Weight-augmented CNN training with shadow weights and dual-mode inference."""

from .checkpoint import Checkpoint
from .dualmode import ModeConfig, materialize, predict
from .errors import ConfigError, DataError, FormatError, NonFiniteLossError, UsageError, WeightAugError
from .models import ArchitectureDef, build, smallcnn, vgg16c
from .shadow import TrainConfig, train
from .transforms import TransformSpec, adjoint, apply, parse_spec, sparsity_of

__all__ = [
    "ArchitectureDef", "Checkpoint", "ConfigError", "DataError", "FormatError", "ModeConfig",
    "NonFiniteLossError", "TrainConfig", "TransformSpec", "UsageError", "WeightAugError",
    "adjoint", "apply", "build", "materialize", "parse_spec", "predict", "smallcnn",
    "sparsity_of", "train", "vgg16c",
]
__version__ = "0.1.0"
