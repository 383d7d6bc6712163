"""Down-sampling inter-layer adapters for frozen Vision Transformers, on a numpy autodiff engine."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, count_kernel_flops, no_grad
from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    DivergenceError,
    IlaLabError,
    InputError,
    UsageError,
)
from .ila import IlaConfig, RsdsMode, Variant, build_adapter_plan
from .model import Model, build_model, vit_forward
from .vit import ViTConfig

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "IlaConfig",
    "IlaLabError",
    "InputError",
    "Model",
    "RsdsMode",
    "Tensor",
    "UsageError",
    "Variant",
    "ViTConfig",
    "backward",
    "build_adapter_plan",
    "build_model",
    "count_kernel_flops",
    "no_grad",
    "vit_forward",
]
