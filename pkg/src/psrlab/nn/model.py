"""Sequential models with named residual skips, a per-call tape, and backprop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import Layer, ResidualAdd, layer_from_dict
from .tensor import Tensor, check_finite


class TapeError(RuntimeError):
    """Raised when backward is requested without a recorded forward pass."""


@dataclass
class Tape:
    """Per-call record of a forward pass. Never share one between evaluations."""

    ctxs: list[dict] = field(default_factory=list)
    site_masks: dict[int, np.ndarray] = field(default_factory=dict)
    batch: int = 0
    recorded: bool = False


# An activation hook maps (site index, activation) -> (new activation, STE mask | None).
ActivationHook = Callable[[int, np.ndarray], tuple[np.ndarray, "np.ndarray | None"]]


class Model:
    """Ordered layers plus a parameter store keyed ``"<layer>.<param>"``.

    Activation *sites* are numbered ``0`` (the input) and ``i + 1`` for the
    output of layer ``i``; the quantizer attaches to these.
    """

    def __init__(self, layers: list[Layer], params: dict[str, Tensor],
                 input_shape: tuple[int, int, int], n_classes: int, arch: str = "custom"):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.layers = list(layers)
        self.params = dict(params)
        self.input_shape = tuple(input_shape)
        self.n_classes = int(n_classes)
        self.arch = arch
        self._index = {name: i for i, name in enumerate(names)}
        self._check_structure()

    @classmethod
    def build(cls, layers, input_shape, n_classes, seed=0, arch="custom", dtype=np.float32):
        rng = np.random.default_rng(seed)
        params = {}
        for layer in layers:
            for pname, arr in layer.init_params(rng).items():
                params[f"{layer.name}.{pname}"] = Tensor(arr.astype(dtype))
        return cls(layers, params, input_shape, n_classes, arch)

    def _check_structure(self):
        shape = self.input_shape
        outs = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ResidualAdd):
                j = self._index.get(layer.source)
                if j is None or j >= i:
                    raise ValueError(f"{layer.name}: unknown or forward source {layer.source!r}")
                if outs[j] != shape:
                    raise ValueError(f"{layer.name}: skip shape {outs[j]} != {shape}")
            else:
                for pname, pshape in layer.param_shapes().items():
                    key = f"{layer.name}.{pname}"
                    if key not in self.params:
                        raise ValueError(f"missing parameter {key}")
                    if self.params[key].shape != pshape:
                        raise ValueError(f"{key}: shape {self.params[key].shape} != {pshape}")
                shape = layer.output_shape(shape)
            outs.append(shape)
        if shape != (self.n_classes,):
            raise ValueError(f"model output shape {shape} != ({self.n_classes},)")

    # -- parameters -------------------------------------------------------

    def layer_params(self, layer: Layer) -> dict[str, np.ndarray]:
        return {pname: self.params[f"{layer.name}.{pname}"].data
                for pname in layer.param_shapes()}

    def param_names(self) -> list[str]:
        return list(self.params)

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=t.data.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def clone(self) -> Model:
        return Model(self.layers, {k: t.copy() for k, t in self.params.items()},
                     self.input_shape, self.n_classes, self.arch)

    def astype(self, dtype) -> Model:
        params = {k: Tensor(t.data.astype(dtype)) for k, t in self.params.items()}
        return Model(self.layers, params, self.input_shape, self.n_classes, self.arch)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def describe(self) -> dict:
        return {"arch": self.arch, "input_shape": list(self.input_shape),
                "n_classes": self.n_classes, "layers": [l.describe() for l in self.layers]}

    @classmethod
    def from_description(cls, desc: dict, params: dict[str, Tensor]) -> Model:
        layers = [layer_from_dict(d) for d in desc["layers"]]
        return cls(layers, params, tuple(desc["input_shape"]), desc["n_classes"], desc["arch"])

    # -- evaluation -------------------------------------------------------

    def _dtype(self):
        for t in self.params.values():
            return t.data.dtype
        return np.float32

    def run(self, x, tape: Tape | None = None, hook: ActivationHook | None = None,
            params: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """Forward pass. ``params`` optionally overrides stored weights."""
        x = np.asarray(x, dtype=self._dtype())
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} != declared {self.input_shape}")
        check_finite(x, "input")
        if tape is not None:
            tape.ctxs, tape.site_masks, tape.batch = [], {}, x.shape[0]
        if hook is not None:
            x = self._apply_hook(hook, 0, x, tape)
        outs = []
        for i, layer in enumerate(self.layers):
            ctx = {}
            if isinstance(layer, ResidualAdd):
                x = x + outs[self._index[layer.source]]
            else:
                p = (self.layer_params(layer) if params is None else
                     {n: params[f"{layer.name}.{n}"] for n in layer.param_shapes()})
                x = layer.forward(x, p, ctx)
            check_finite(x, layer.name)
            if hook is not None:
                x = self._apply_hook(hook, i + 1, x, tape)
            outs.append(x)
            if tape is not None:
                ctx["params"] = params
                tape.ctxs.append(ctx)
        if tape is not None:
            tape.recorded = True
        return x

    @staticmethod
    def _apply_hook(hook, site, x, tape):
        x, mask = hook(site, x)
        if tape is not None and mask is not None:
            tape.site_masks[site] = mask
        return x

    def forward(self, x, tape: Tape | None = None) -> np.ndarray:
        return self.run(x, tape)

    __call__ = forward

    def backward(self, tape: Tape, grad_logits, param_grads: bool = True,
                 per_sample: bool = False, input_grad: bool = False,
                 store: bool = True):
        """Backpropagate ``grad_logits`` through a recorded tape.

        Returns ``(grads, dx)``: ``grads`` maps parameter names to arrays
        (with a leading batch axis when ``per_sample``), ``dx`` is the input
        gradient or ``None``. With ``store`` the summed gradients are also
        written to each parameter's ``grad``.
        """
        if tape is None or not tape.recorded:
            raise TapeError("backward called without a recorded forward tape")
        g = np.asarray(grad_logits, dtype=self._dtype())
        pending: dict[int, np.ndarray] = {}
        grads: dict[str, np.ndarray] = {}
        n = len(self.layers)
        for i in range(n - 1, -1, -1):
            layer = self.layers[i]
            if i in pending:
                g = g + pending.pop(i)
            mask = tape.site_masks.get(i + 1)
            if mask is not None:
                g = g * mask
            if isinstance(layer, ResidualAdd):
                j = self._index[layer.source]
                pending[j] = pending[j] + g if j in pending else g
                continue
            ctx = tape.ctxs[i]
            override = ctx.get("params")
            p = (self.layer_params(layer) if override is None else
                 {k: override[f"{layer.name}.{k}"] for k in layer.param_shapes()})
            need_dx = input_grad or i > 0
            g, lg = layer.backward(g, p, ctx, param_grads=param_grads, per_sample=per_sample,
                                   need_dx=need_dx)
            for pname, arr in lg.items():
                grads[f"{layer.name}.{pname}"] = arr
            if not need_dx:
                g = None
                break
        dx = None
        if input_grad:
            mask = tape.site_masks.get(0)
            dx = g if mask is None else g * mask
        if param_grads and store:
            for k, arr in grads.items():
                self.params[k].set_grad(arr.sum(axis=0) if per_sample else arr)
        return grads, dx


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(labels, k):
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return y


def cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError("logits must be [B, K] with B >= 1")
    y = _check_labels(labels, logits.shape[1])
    if y.size != logits.shape[0]:
        raise ValueError("labels/logits batch mismatch")
    lsm = log_softmax(logits)
    return float(-lsm[np.arange(y.size), y].mean())


def cross_entropy_grad(logits, labels, reduction: str = "mean") -> np.ndarray:
    """d loss / d logits. ``reduction='sum'`` gives per-sample gradients."""
    logits = np.asarray(logits)
    y = _check_labels(labels, logits.shape[1])
    p = np.exp(log_softmax(logits))
    p[np.arange(y.size), y] -= 1.0
    if reduction == "mean":
        p /= y.size
    return p.astype(logits.dtype)


def loss_and_grads(model: Model, x, y, store: bool = True):
    """Forward + backward on a fresh tape; returns (loss, grads)."""
    tape = Tape()
    logits = model.forward(x, tape)
    loss = cross_entropy(logits, y)
    grads, _ = model.backward(tape, cross_entropy_grad(logits, y), store=store)
    return loss, grads


def per_sample_grads(model: Model, x, y):
    """Per-sample gradients of the per-sample loss; also returns the logits."""
    tape = Tape()
    logits = model.forward(x, tape)
    grads, _ = model.backward(tape, cross_entropy_grad(logits, y, reduction="sum"),
                              per_sample=True, store=False)
    return grads, logits


def input_gradient(model, x, y, tape: Tape | None = None, logits_grad=None):
    """d(mean cross-entropy)/dx, or the pull-back of ``logits_grad`` if given.

    Works for any object exposing the ``forward(x, tape)`` / ``backward``
    protocol, including quantized models.
    """
    tape = Tape() if tape is None else tape
    logits = model.forward(x, tape)
    g = cross_entropy_grad(logits, y) if logits_grad is None else logits_grad
    _, dx = model.backward(tape, g, param_grads=False, input_grad=True, store=False)
    return dx, logits


def predict(model, x, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        out.append(model.forward(x[i:i + batch_size]).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model, x, y, batch_size: int = 256) -> float:
    if len(y) == 0:
        return float("nan")
    return float((predict(model, x, batch_size) == np.asarray(y)).mean())
