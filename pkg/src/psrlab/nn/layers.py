"""Layer kinds understood by the engine.

Every layer is stateless with respect to a forward pass: anything needed by
``backward`` is stashed in the per-call ``ctx`` dict that the tape owns, so the
same model can be evaluated concurrently on different tapes.

``backward`` returns ``(dx, grads)``. With ``per_sample=True`` each gradient
carries a leading batch axis holding the gradient of the *per-sample* upstream
signal, which is what DP-SGD clipping needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ParamShapes = dict[str, tuple[int, ...]]


@dataclass
class Layer:
    name: str

    kind = "layer"

    def param_shapes(self) -> ParamShapes:
        return {}

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x, p, ctx):
        raise NotImplementedError

    def backward(self, g, p, ctx, param_grads=True, per_sample=False, need_dx=True):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name}


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """(B, C, H, W) -> (B, Ho*Wo, C*k*k), feature order (C, kh, kw)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * k * k)
    return cols, ho, wo


def col2im(dcols, x_shape, k, stride, pad, ho, wo):
    """Adjoint of :func:`im2col`."""
    b, c, h, w = x_shape
    d = dcols.reshape(b, ho, wo, c, k, k)
    dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[..., i, j]
    dxp = dxp.transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp)


@dataclass
class Conv2d(Layer):
    in_channels: int = 1
    out_channels: int = 1
    kernel: int = 3
    stride: int = 1
    pad: int = 1

    kind = "conv2d"

    def param_shapes(self):
        return {"weight": (self.out_channels, self.in_channels, self.kernel, self.kernel),
                "bias": (self.out_channels,)}

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel * self.kernel
        w = rng.standard_normal(self.param_shapes()["weight"]) * np.sqrt(2.0 / fan_in)
        return {"weight": w.astype(np.float32),
                "bias": np.zeros(self.out_channels, dtype=np.float32)}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        return (self.out_channels, ho, wo)

    def forward(self, x, p, ctx):
        cols, ho, wo = im2col(x, self.kernel, self.stride, self.pad)
        wmat = p["weight"].reshape(self.out_channels, -1)
        out = cols @ wmat.T + p["bias"]
        ctx["cols"], ctx["x_shape"], ctx["hw"] = cols, x.shape, (ho, wo)
        return out.transpose(0, 2, 1).reshape(x.shape[0], self.out_channels, ho, wo)

    def backward(self, g, p, ctx, param_grads=True, per_sample=False, need_dx=True):
        b = g.shape[0]
        ho, wo = ctx["hw"]
        cols = ctx["cols"]
        gflat = g.reshape(b, self.out_channels, ho * wo)  # (B, O, P)
        wmat = p["weight"].reshape(self.out_channels, -1)
        grads = {}
        if param_grads:
            if per_sample:
                gw = np.matmul(gflat, cols)
                grads["weight"] = gw.reshape((b,) + p["weight"].shape)
                grads["bias"] = gflat.sum(axis=2)
            else:
                gw = np.tensordot(gflat, cols, axes=([0, 2], [0, 1]))
                grads["weight"] = gw.reshape(p["weight"].shape)
                grads["bias"] = gflat.sum(axis=(0, 2))
        if not need_dx:
            return None, grads
        dcols = np.matmul(gflat.transpose(0, 2, 1), wmat)
        dx = col2im(dcols, ctx["x_shape"], self.kernel, self.stride, self.pad, ho, wo)
        return dx, grads

    def describe(self):
        return {**super().describe(), "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "pad": self.pad}


@dataclass
class GroupNorm(Layer):
    groups: int = 1
    channels: int = 1
    eps: float = 1e-5

    kind = "groupnorm"

    def __post_init__(self):
        if self.groups < 1 or self.channels % self.groups:
            raise ValueError(
                f"{self.name}: channels={self.channels} not divisible by groups={self.groups}")

    def param_shapes(self):
        return {"weight": (self.channels,), "bias": (self.channels,)}

    def init_params(self, rng):
        return {"weight": np.ones(self.channels, dtype=np.float32),
                "bias": np.zeros(self.channels, dtype=np.float32)}

    def output_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ValueError(f"{self.name}: expected {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def forward(self, x, p, ctx):
        b = x.shape[0]
        xg = x.reshape(b, self.groups, -1)
        # statistics accumulate in float64, elementwise work stays in x.dtype
        mean = xg.mean(axis=2, keepdims=True, dtype=np.float64)
        centered = xg - mean.astype(x.dtype)
        var = np.einsum("bgn,bgn->bg", centered, centered, dtype=np.float64)[..., None]
        var /= xg.shape[2]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (centered * inv_std).reshape(x.shape)
        ctx["xhat"], ctx["inv_std"] = xhat, inv_std
        bshape = (1, self.channels) + (1,) * (x.ndim - 2)
        return xhat * p["weight"].reshape(bshape) + p["bias"].reshape(bshape)

    def backward(self, g, p, ctx, param_grads=True, per_sample=False, need_dx=True):
        xhat, inv_std = ctx["xhat"], ctx["inv_std"]
        b = g.shape[0]
        bshape = (1, self.channels) + (1,) * (g.ndim - 2)
        grads = {}
        if param_grads:
            gf = g.reshape(b, self.channels, -1)
            xf = xhat.reshape(b, self.channels, -1)
            gw = np.einsum("bcn,bcn->bc", gf, xf, dtype=np.float64)
            gb = gf.sum(axis=2, dtype=np.float64)
            if not per_sample:
                gw, gb = gw.sum(axis=0), gb.sum(axis=0)
            grads["weight"] = gw.astype(g.dtype)
            grads["bias"] = gb.astype(g.dtype)
        dxhat = (g * p["weight"].reshape(bshape)).reshape(b, self.groups, -1)
        xh = xhat.reshape(b, self.groups, -1)
        n = xh.shape[2]
        s1 = dxhat.sum(axis=2, keepdims=True, dtype=np.float64).astype(g.dtype)
        s2 = np.einsum("bgn,bgn->bg", dxhat, xh, dtype=np.float64)[..., None].astype(g.dtype)
        dx = (inv_std / n) * (n * dxhat - s1 - xh * s2)
        return dx.reshape(g.shape), grads

    def describe(self):
        return {**super().describe(), "groups": self.groups, "channels": self.channels,
                "eps": self.eps}


@dataclass
class ReLU(Layer):
    kind = "relu"

    def forward(self, x, p, ctx):
        mask = x > 0
        ctx["mask"] = mask
        return x * mask

    def backward(self, g, p, ctx, param_grads=True, per_sample=False, need_dx=True):
        return g * ctx["mask"], {}


@dataclass
class Linear(Layer):
    in_features: int = 1
    out_features: int = 1

    kind = "linear"

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def init_params(self, rng):
        bound = 1.0 / np.sqrt(self.in_features)
        w = rng.uniform(-bound, bound, (self.out_features, self.in_features))
        return {"weight": w.astype(np.float32),
                "bias": np.zeros(self.out_features, dtype=np.float32)}

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ValueError(f"{self.name}: expected ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x, p, ctx):
        ctx["x"] = x
        return x @ p["weight"].T + p["bias"]

    def backward(self, g, p, ctx, param_grads=True, per_sample=False, need_dx=True):
        x = ctx["x"]
        grads = {}
        if param_grads:
            if per_sample:
                grads["weight"] = g[:, :, None] * x[:, None, :]
                grads["bias"] = g.copy()
            else:
                grads["weight"] = g.T @ x
                grads["bias"] = g.sum(axis=0)
        return g @ p["weight"], grads

    def describe(self):
        return {**super().describe(), "in": self.in_features, "out": self.out_features}


@dataclass
class MaxPool(Layer):
    k: int = 2

    kind = "maxpool"

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.k or w % self.k:
            raise ValueError(f"{self.name}: spatial dims {h}x{w} not divisible by {self.k}")
        return (c, h // self.k, w // self.k)

    def forward(self, x, p, ctx):
        b, c, h, w = x.shape
        k = self.k
        win = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(b, c, h // k, w // k, k * k)
        idx = win.argmax(axis=4)
        ctx["idx"], ctx["x_shape"] = idx, x.shape
        return np.take_along_axis(win, idx[..., None], axis=4)[..., 0]

    def backward(self, g, p, ctx, param_grads=True, per_sample=False, need_dx=True):
        b, c, h, w = ctx["x_shape"]
        k = self.k
        dwin = np.zeros((b, c, h // k, w // k, k * k), dtype=g.dtype)
        np.put_along_axis(dwin, ctx["idx"][..., None], g[..., None], axis=4)
        dx = dwin.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(b, c, h, w), {}

    def describe(self):
        return {**super().describe(), "k": self.k}


@dataclass
class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def output_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, p, ctx):
        ctx["x_shape"] = x.shape
        return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(self, g, p, ctx, param_grads=True, per_sample=False, need_dx=True):
        b, c, h, w = ctx["x_shape"]
        dx = np.broadcast_to((g / (h * w))[:, :, None, None], (b, c, h, w))
        return np.ascontiguousarray(dx), {}


@dataclass
class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, p, ctx):
        ctx["x_shape"] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g, p, ctx, param_grads=True, per_sample=False, need_dx=True):
        return g.reshape(ctx["x_shape"]), {}


@dataclass
class ResidualAdd(Layer):
    """Adds the output of an earlier layer, referenced by name."""

    source: str = ""

    kind = "residual"

    def forward(self, x, p, ctx):  # the model supplies the skip operand
        raise RuntimeError("ResidualAdd is evaluated by the model")

    def backward(self, g, p, ctx, param_grads=True, per_sample=False, need_dx=True):
        raise RuntimeError("ResidualAdd is evaluated by the model")

    def describe(self):
        return {**super().describe(), "source": self.source}


LAYER_KINDS = {cls.kind: cls for cls in
               (Conv2d, GroupNorm, ReLU, Linear, MaxPool, GlobalAvgPool, Flatten, ResidualAdd)}

def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("kind")
    cls = LAYER_KINDS.get(kind)
    if cls is None:
        raise ValueError(f"unknown layer kind {kind!r}")
    if cls is Conv2d:
        return Conv2d(d["name"], d["in"], d["out"], d["kernel"], d["stride"], d["pad"])
    if cls is Linear:
        return Linear(d["name"], d["in"], d["out"])
    return cls(**d)
