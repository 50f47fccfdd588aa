from . import functional
from .layers import BatchNorm2d, BottleneckBlock, Conv2d, HmpBlock, Module, make_block
from .model import FINAL_LAYER_PREFIX, HourglassModel, ModelConfig, backward, build_model, forward
from .tensor import DivergenceError, Tensor, no_grad

__all__ = [
    "BatchNorm2d",
    "BottleneckBlock",
    "Conv2d",
    "DivergenceError",
    "FINAL_LAYER_PREFIX",
    "HmpBlock",
    "HourglassModel",
    "ModelConfig",
    "Module",
    "Tensor",
    "backward",
    "build_model",
    "forward",
    "functional",
    "make_block",
    "no_grad",
]
