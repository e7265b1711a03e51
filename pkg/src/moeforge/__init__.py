"""moeforge: compose Mixture-of-Domain-Experts checkpoints from dense expert
models, run them with a deterministic reference runtime, train routers, and
analyze inference cost."""

from .arch import ArchDescriptor, CompatReport, MISTRAL_7B, check_compatibility, infer_arch
from .errors import (
    ArchitectureError,
    CompatibilityError,
    FormatError,
    MoeforgeError,
    RecipeError,
    TrainingError,
)
from .tensorstore import TensorMap, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ArchDescriptor",
    "CompatReport",
    "MISTRAL_7B",
    "check_compatibility",
    "infer_arch",
    "TensorMap",
    "load_checkpoint",
    "save_checkpoint",
    "MoeforgeError",
    "FormatError",
    "ArchitectureError",
    "CompatibilityError",
    "RecipeError",
    "TrainingError",
]
