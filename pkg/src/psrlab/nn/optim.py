"""Momentum SGD over a named parameter store."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class SGD:
    """``v <- momentum * v + g``; ``p <- p - lr * v``. Buffers persist across steps."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        """Apply one update; ``grads`` defaults to each parameter's ``.grad``."""
        for name, t in self.params.items():
            g = t.grad if grads is None else grads.get(name)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.data.dtype)
            if g.shape != t.shape:
                raise ValueError(f"{name}: grad shape {g.shape} != param shape {t.shape}")
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
            else:
                v = g
            t.data = (t.data - self.lr * v).astype(t.data.dtype)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.0, state: dict | None = None) -> dict:
    """Functional form of :class:`SGD`; ``state`` carries velocity buffers."""
    opt = SGD(params, lr, momentum)
    if state is not None:
        opt.velocity = state
    opt.step(grads)
    return opt.velocity
