"""Scale-aware neural SDF reconstruction from multi-distance normal maps."""

from .field import FieldConfig, HashGridConfig, ScaleField
from .train import TrainConfig, train

__all__ = ["FieldConfig", "HashGridConfig", "ScaleField", "TrainConfig", "train"]
__version__ = "0.1.0"
