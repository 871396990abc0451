"""Static post-training INT8 quantization with a single min/max calibration sweep.

Inference is fake-quantized: weights and every activation site pass through
quantize/dequantize with stored per-tensor parameters, arithmetic stays in
float32. Gradients use the straight-through estimator (identity inside the
calibrated range, zero where the value saturates), so the attack suite can
target quantized models unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn.checkpoint import load_tensors, save_tensors
from .nn.model import Model, Tape
from .nn.tensor import Tensor, check_finite

QMIN, QMAX = -128, 127
SCALE_BYTES, ZERO_POINT_BYTES, RANGE_ENTRY_BYTES = 4, 1, 8


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise QuantizationError("scale must be positive")
        if not QMIN <= self.zero_point <= QMAX:
            raise QuantizationError("zero point outside int8")

    @property
    def representable(self) -> tuple[float, float]:
        return ((QMIN - self.zero_point) * self.scale, (QMAX - self.zero_point) * self.scale)


def qparams_from_range(vmin: float, vmax: float) -> QuantParams:
    """Affine parameters covering ``[min(vmin, 0), max(vmax, 0)]``."""
    if not (np.isfinite(vmin) and np.isfinite(vmax)):
        raise QuantizationError("non-finite range")
    lo, hi = min(float(vmin), 0.0), max(float(vmax), 0.0)
    # scales are kept float32-exact so stored checkpoints reload identically
    if hi == lo:
        return QuantParams(float(np.float32(max(abs(hi), 1e-8) / 127.0)), 0)
    s = float(np.float32((hi - lo) / 255.0))
    z = int(np.clip(np.round(QMIN - lo / s), QMIN, QMAX))
    return QuantParams(s, z)


def quantize(v, qp: QuantParams) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.clip(np.round(v / qp.scale) + qp.zero_point, QMIN, QMAX).astype(np.int8)


def dequantize(q, qp: QuantParams) -> np.ndarray:
    return ((np.asarray(q, dtype=np.float64) - qp.zero_point) * qp.scale).astype(np.float32)


def fake_quant(v, qp: QuantParams) -> np.ndarray:
    return dequantize(quantize(v, qp), qp)


# -- calibration -------------------------------------------------------------

def _as_images(calibration_set):
    return getattr(calibration_set, "images", calibration_set)


def calibrate_ranges(model: Model, calibration_set, batch_size: int = 256
                     ) -> dict[int, tuple[float, float]]:
    """One forward sweep recording per-site running (min, max)."""
    images = np.asarray(_as_images(calibration_set), dtype=np.float32)
    if len(images) == 0:
        raise QuantizationError("empty calibration set")
    ranges: dict[int, list[float]] = {}

    def observe(site, x):
        lo, hi = float(x.min()), float(x.max())
        cur = ranges.get(site)
        ranges[site] = [lo, hi] if cur is None else [min(cur[0], lo), max(cur[1], hi)]
        return x, None

    for i in range(0, len(images), batch_size):
        model.run(images[i:i + batch_size], hook=observe)
    return {k: (v[0], v[1]) for k, v in sorted(ranges.items())}


# -- quantized model -----------------------------------------------------------

class QuantizedModel:
    """INT8 weights with per-tensor parameters plus calibrated activation ranges."""

    def __init__(self, structure: Model, codes: dict[str, np.ndarray],
                 weight_qparams: dict[str, QuantParams],
                 act_ranges: dict[int, tuple[float, float]]):
        missing = set(structure.params) - set(codes)
        if missing:
            raise QuantizationError(f"no int8 counterpart for {sorted(missing)}")
        n_sites = len(structure.layers) + 1
        absent = [s for s in range(n_sites) if s not in act_ranges]
        if absent:
            raise QuantizationError(f"missing activation range for sites {absent}")
        self._float = structure
        self.codes = {k: np.asarray(v, dtype=np.int8) for k, v in codes.items()}
        self.weight_qparams = dict(weight_qparams)
        self.act_ranges = {int(k): (float(v[0]), float(v[1])) for k, v in act_ranges.items()}
        self.act_qparams = {k: qparams_from_range(*v) for k, v in self.act_ranges.items()}
        self._deq = {k: dequantize(self.codes[k], self.weight_qparams[k]) for k in self.codes}
        self.input_shape = structure.input_shape
        self.n_classes = structure.n_classes
        self.arch = structure.arch

    def _hook(self, site, x):
        qp = self.act_qparams.get(site)
        if qp is None:
            raise QuantizationError(f"missing range for activation site {site}")
        lo, hi = qp.representable
        mask = ((x >= lo) & (x <= hi)).astype(x.dtype)
        return fake_quant(x, qp), mask

    def forward(self, x, tape: Tape | None = None) -> np.ndarray:
        return self._float.run(x, tape, hook=self._hook, params=self._deq)

    __call__ = forward

    def backward(self, tape, grad_logits, param_grads=False, per_sample=False,
                 input_grad=True, store=False):
        return self._float.backward(tape, grad_logits, param_grads=param_grads,
                                    per_sample=per_sample, input_grad=input_grad, store=False)

    def dequantized_model(self) -> Model:
        return Model(self._float.layers, {k: Tensor(v) for k, v in self._deq.items()},
                     self.input_shape, self.n_classes, self.arch)

    def n_params(self) -> int:
        return sum(c.size for c in self.codes.values())

    def describe(self) -> dict:
        return self._float.describe()

    # -- persistence (dtype tag 1 for codes) --

    def save(self, path, extra: dict | None = None) -> None:
        tensors = dict(self.codes)
        for k, qp in self.weight_qparams.items():
            tensors[f"{k}.__qparams__"] = np.array([qp.scale, qp.zero_point], dtype=np.float32)
        sites = sorted(self.act_ranges)
        tensors["__act_ranges__"] = np.array([self.act_ranges[s] for s in sites],
                                             dtype=np.float32)
        meta = {"type": "quantized", "model": self.describe(), "sites": sites, **(extra or {})}
        save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> QuantizedModel:
        tensors, meta = load_tensors(path)
        if not meta or meta.get("type") != "quantized":
            raise QuantizationError(f"{path} is not a quantized checkpoint")
        ranges_arr = tensors.pop("__act_ranges__")
        ranges = {s: (float(r[0]), float(r[1])) for s, r in zip(meta["sites"], ranges_arr)}
        qps, codes = {}, {}
        for k, v in tensors.items():
            if k.endswith(".__qparams__"):
                qps[k[:-len(".__qparams__")]] = QuantParams(float(v[0]), int(round(float(v[1]))))
            else:
                codes[k] = v
        structure = Model.from_description(
            meta["model"], {k: Tensor(dequantize(c, qps[k])) for k, c in codes.items()})
        return cls(structure, codes, qps, ranges)


def quantize_model(model: Model, ranges: dict[int, tuple[float, float]]) -> QuantizedModel:
    """Per-tensor affine INT8 weights plus the given activation ranges."""
    if not ranges:
        raise QuantizationError("activation ranges are not calibrated")
    codes, qps = {}, {}
    for name, t in model.params.items():
        check_finite(t.data, name)
        qp = qparams_from_range(float(t.data.min()), float(t.data.max()))
        qps[name] = qp
        codes[name] = quantize(t.data, qp)
    return QuantizedModel(model, codes, qps, ranges)


def model_size_bytes(model) -> int:
    """4 bytes/parameter for float models; 1 byte/parameter plus per-tensor
    (scale, zero point) and an 8-byte range-table entry per site when quantized."""
    if isinstance(model, QuantizedModel):
        n_tensors = len(model.codes)
        return (model.n_params() + n_tensors * (SCALE_BYTES + ZERO_POINT_BYTES)
                + len(model.act_ranges) * RANGE_ENTRY_BYTES)
    return 4 * model.n_params()


def size_reduction_pct(model: Model, qmodel: QuantizedModel) -> float:
    before, after = model_size_bytes(model), model_size_bytes(qmodel)
    return 100.0 * (before - after) / before
