"""Full-reference image quality assessment with a patch-sequence transformer.

The pipeline: context-aware patch sampling of an aligned reference/distorted
pair, a shared transformer encoder over the uv-indexed patch sequences, a
channel-attention network modulating the feature difference, and an MLP
regressing the modulated difference to a quality score.
"""

from modiqa.diffnet import DiffNetConfig
from modiqa.encoder import ConfigError, ViTConfig
from modiqa.model import PRESETS, ModelConfig, QualityModel
from modiqa.sampling import SamplerConfig
from modiqa.training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DiffNetConfig",
    "ModelConfig",
    "PRESETS",
    "QualityModel",
    "SamplerConfig",
    "TrainConfig",
    "ViTConfig",
]
