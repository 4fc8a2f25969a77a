"""Deep adaptive image resampling for super-resolution and joint depth filtering."""

from .config import ModelConfig, TrainConfig
from .models import Model, build_model, forward_sr
from .resampling import KernelField, adaptive_resample, adaptive_resample_asp
from .tensor import PrecisionMode, StructuralError, Tensor, backward, grad_check, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "KernelField", "Model", "ModelConfig", "PrecisionMode", "StructuralError", "Tensor", "TrainConfig",
    "adaptive_resample", "adaptive_resample_asp", "backward", "build_model", "forward_sr", "grad_check",
    "no_grad", "precision",
]
