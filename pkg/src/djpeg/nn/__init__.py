"""Minimal numpy tensor engine with reverse-mode autodiff."""
from . import functional
from .functional import DimensionError
from .layers import (
    AvgPool, Bias, Conv, DCTFilterbank, DiffConv, InnerProduct, Layer, LayerSpec,
    MaxPool, ReLU, Scale, Sigmoid, SoftMax,
)
from .model import Sequential
from .optim import SGD, SgdConfig, learning_rate, sgd_step
from .tensor import StateError, Tensor, no_grad

__all__ = [
    "AvgPool", "Bias", "Conv", "DCTFilterbank", "DiffConv", "DimensionError", "InnerProduct",
    "Layer", "LayerSpec", "MaxPool", "ReLU", "SGD", "Scale", "Sequential", "SgdConfig",
    "Sigmoid", "SoftMax", "StateError", "Tensor", "functional", "learning_rate", "no_grad",
    "sgd_step",
]
