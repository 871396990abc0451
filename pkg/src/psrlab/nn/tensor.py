"""Dense float tensors with an optional gradient buffer."""

from __future__ import annotations

import numpy as np

_ALLOWED = (np.float32, np.float64)


class DivergenceError(FloatingPointError):
    """Raised when a non-finite value reaches a layer boundary."""


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values at {where}")


class Tensor:
    """A named-parameter carrier: ``data`` plus an optional same-shape ``grad``.

    Data is kept as float32 unless a float64 array is passed explicitly
    (used by the numerical gradient checks).
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        arr = np.asarray(data)
        if arr.dtype not in _ALLOWED:
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        check_finite(arr, "tensor construction")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        if grad is not None:
            self.set_grad(grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def set_grad(self, grad) -> None:
        g = np.asarray(grad, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ValueError(f"grad shape {g.shape} != data shape {self.data.shape}")
        self.grad = g

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"
