"""Desk-scale architectures (group-normalised residual CNNs) and toy models."""

from __future__ import annotations

import numpy as np

from .layers import Conv2d, Flatten, GlobalAvgPool, GroupNorm, Linear, MaxPool, ReLU, ResidualAdd
from .model import Model
from .tensor import Tensor


def default_groups(channels: int) -> int:
    return min(8, channels)


def _conv_block(prefix, cin, cout, pool=False):
    layers = [Conv2d(f"{prefix}.conv", cin, cout, 3, 1, 1),
              GroupNorm(f"{prefix}.gn", default_groups(cout), cout),
              ReLU(f"{prefix}.relu")]
    if pool:
        layers.append(MaxPool(f"{prefix}.pool", 2))
    return layers


def _res_block(prefix, width, source):
    return [Conv2d(f"{prefix}.conv1", width, width, 3, 1, 1),
            GroupNorm(f"{prefix}.gn1", default_groups(width), width),
            ReLU(f"{prefix}.relu1"),
            Conv2d(f"{prefix}.conv2", width, width, 3, 1, 1),
            GroupNorm(f"{prefix}.gn2", default_groups(width), width),
            ResidualAdd(f"{prefix}.add", source),
            ReLU(f"{prefix}.relu2")]


def micro_resnet9(input_shape=(1, 16, 16), n_classes=10, widths=(16, 32), seed=0) -> Model:
    w1, w2 = widths
    layers = _conv_block("stem", input_shape[0], w1, pool=True)
    layers += _conv_block("stage1", w1, w2, pool=True)
    layers += _res_block("res1", w2, "stage1.pool")
    layers += [GlobalAvgPool("gap"), Linear("fc", w2, n_classes)]
    return Model.build(layers, input_shape, n_classes, seed=seed, arch="micro-resnet-9")


def micro_resnet18(input_shape=(1, 16, 16), n_classes=10, widths=(16, 32, 64), seed=0) -> Model:
    w1, w2, w3 = widths
    layers = _conv_block("stem", input_shape[0], w1)
    layers += _res_block("res1", w1, "stem.relu")
    layers += _conv_block("down1", w1, w2, pool=True)
    layers += _res_block("res2", w2, "down1.pool")
    layers += _conv_block("down2", w2, w3, pool=True)
    layers += _res_block("res3", w3, "down2.pool")
    layers += _res_block("res4", w3, "res3.relu2")
    layers += [GlobalAvgPool("gap"), Linear("fc", w3, n_classes)]
    return Model.build(layers, input_shape, n_classes, seed=seed, arch="micro-resnet-18-like")


def linear_classifier(weight, bias=None, input_shape=None) -> Model:
    """Flatten + a single Linear layer with the given weights."""
    weight = np.asarray(weight, dtype=np.float32)
    k, d = weight.shape
    if input_shape is None:
        input_shape = (1, 1, d)
    bias = np.zeros(k, dtype=np.float32) if bias is None else np.asarray(bias, np.float32)
    layers = [Flatten("flat"), Linear("fc", d, k)]
    params = {"fc.weight": Tensor(weight), "fc.bias": Tensor(bias)}
    return Model(layers, params, input_shape, k, arch=f"linear-{d}x{k}")


def small_cnn(input_shape=(1, 8, 8), n_classes=3, channels=4, seed=0) -> Model:
    """Two-layer CNN used by the reference-evaluator tests."""
    c, h, w = input_shape
    layers = [Conv2d("conv", c, channels, 3, 1, 1), ReLU("relu"), Flatten("flat"),
              Linear("fc", channels * h * w, n_classes)]
    return Model.build(layers, input_shape, n_classes, seed=seed, arch="small-cnn")


ARCHITECTURES = {"micro-resnet-9": micro_resnet9, "micro-resnet-18-like": micro_resnet18}


def build_model(arch: str, input_shape, n_classes, widths=None, seed=0) -> Model:
    try:
        ctor = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    kwargs = {} if widths is None else {"widths": tuple(widths)}
    return ctor(tuple(input_shape), n_classes, seed=seed, **kwargs)
