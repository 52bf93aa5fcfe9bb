"""Hybrid convolutional-transformer segmentation for dual-pol SAR scenes."""

from .errors import ConvTrError
from .model import ModelConfig, build_model, model_forward, model_predict
from .optim import TrainConfig
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ConvTrError",
    "ModelConfig",
    "TrainConfig",
    "Tensor",
    "build_model",
    "model_forward",
    "model_predict",
    "__version__",
]
