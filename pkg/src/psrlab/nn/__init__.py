"""Minimal numpy tensor/autodiff engine for small group-normalised CNNs."""

from .layers import (Conv2d, Flatten, GlobalAvgPool, GroupNorm, Layer, Linear, MaxPool, ReLU,
                     ResidualAdd)
from .model import (Model, Tape, TapeError, accuracy, cross_entropy, cross_entropy_grad,
                    input_gradient, loss_and_grads, per_sample_grads, predict)
from .optim import SGD, sgd_step
from .tensor import DivergenceError, Tensor
from .zoo import build_model, linear_classifier, micro_resnet9, micro_resnet18, small_cnn

__all__ = [
    "Conv2d", "Flatten", "GlobalAvgPool", "GroupNorm", "Layer", "Linear", "MaxPool", "ReLU",
    "ResidualAdd", "Model", "Tape", "TapeError", "accuracy", "cross_entropy",
    "cross_entropy_grad", "input_gradient", "loss_and_grads", "per_sample_grads", "predict",
    "SGD", "sgd_step", "DivergenceError", "Tensor", "build_model", "linear_classifier",
    "micro_resnet9", "micro_resnet18", "small_cnn",
]
