"""Small deterministic numpy core: layers with exact backward passes, losses, Adam."""

from .checkpoint import CheckpointError, load_arrays, save_arrays
from .gradcheck import grad_check, grad_check_loss
from .layers import (
    LSTM, Activation, BatchNorm, Conv2D, Dense, Dropout, Embedding, Flatten,
    Layer, LayerNorm, MaxPool2, Sequential,
)
from .losses import bce, cce, loss, one_hot
from .ops import ShapeError, sigmoid, softmax
from .optim import Adam, NonFiniteGradient
from .params import FLOAT, Param, ParamStore

__all__ = [
    "Activation", "Adam", "BatchNorm", "CheckpointError", "Conv2D", "Dense", "Dropout",
    "Embedding", "FLOAT", "Flatten", "LSTM", "Layer", "LayerNorm", "MaxPool2",
    "NonFiniteGradient", "Param", "ParamStore", "Sequential", "ShapeError", "bce", "cce",
    "grad_check", "grad_check_loss", "load_arrays", "loss", "one_hot", "save_arrays",
    "sigmoid", "softmax",
]
