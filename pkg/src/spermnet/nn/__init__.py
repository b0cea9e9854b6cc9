from . import functional
from .functional import (
    ShapeError,
    adaptive_avg_pool,
    batch_norm2d,
    conv2d,
    dropout,
    linear,
    max_pool2d,
    mse_loss,
    relu,
)
from .layers import BasicBlock, BatchNorm2d, Conv2d, Dropout, Linear, Module, Sequential
from .model import ConfigError, Model, ModelConfig, ResNet, backward, build_model, forward, predict
from .tensor import Tensor, no_grad
from .weights import WeightError, export_weights, import_weights
