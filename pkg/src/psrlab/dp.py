"""DP-SGD primitives and a Renyi-DP accountant for the Poisson-subsampled Gaussian."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

log = logging.getLogger(__name__)

DEFAULT_ORDERS = tuple(range(2, 257))
SIGMA_BRACKET = (0.3, 64.0)


class PrivacyError(ValueError):
    pass


@dataclass
class PrivacySpec:
    clip_norm: float = 1.0
    noise_multiplier: float | None = None
    delta: float = 1e-5
    sampling_rate: float = 0.05
    target_epsilon: float | None = None

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise PrivacyError("clip_norm must be positive")
        if not 0 < self.delta < 1:
            raise PrivacyError("delta must lie in (0, 1)")
        if not 0 < self.sampling_rate <= 1:
            raise PrivacyError("sampling_rate must lie in (0, 1]")
        if self.noise_multiplier is not None and self.target_epsilon is not None:
            raise PrivacyError("give either noise_multiplier or target_epsilon, not both")
        if self.noise_multiplier is not None and self.noise_multiplier <= 0:
            raise PrivacyError("noise_multiplier must be positive")

    def check_delta(self, n: int) -> None:
        if self.delta >= 1.0 / n:
            log.warning("delta=%g is not below 1/N=%g", self.delta, 1.0 / n)


# -- sampling, clipping, noising --------------------------------------------

def poisson_sample_batch(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Include each of ``n`` indices independently with probability ``q``."""
    if not 0 < q <= 1:
        raise PrivacyError("q must lie in (0, 1]")
    if q == 1:
        return np.arange(n)
    return np.flatnonzero(rng.random(n) < q)


def flatten_per_sample(grads: dict[str, np.ndarray], names=None) -> np.ndarray:
    """Per-sample gradient dict (leading batch axis) -> [B, D] matrix."""
    names = list(grads) if names is None else names
    b = next(iter(grads.values())).shape[0]
    return np.concatenate([grads[k].reshape(b, -1) for k in names], axis=1)


def unflatten(vec: np.ndarray, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for k, shp in shapes.items():
        n = int(np.prod(shp))
        out[k] = vec[off:off + n].reshape(shp)
        off += n
    return out


def per_sample_norms(per_sample: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("bd,bd->b", per_sample, per_sample, dtype=np.float64))


def clip_per_sample(per_sample, clip_norm: float) -> np.ndarray:
    """Scale each row by ``min(1, C / ||row||_2)`` (global norm over all parameters)."""
    if clip_norm <= 0:
        raise PrivacyError("clip_norm must be positive")
    g = np.asarray(per_sample)
    if g.ndim == 1:
        g = g[None]
    if not np.all(np.isfinite(g)):
        raise PrivacyError("non-finite per-sample gradient")
    norms = per_sample_norms(g)
    scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-12))
    return (g * scale[:, None]).astype(g.dtype)


def noisy_aggregate(clipped, noise_multiplier: float, clip_norm: float, expected_batch: float,
                    rng: np.random.Generator, dim: int | None = None) -> np.ndarray:
    """``(sum_i g_i + N(0, sigma^2 C^2 I)) / expected_batch``.

    ``clipped`` is ``[B, D]``; ``B`` may be 0 (a noise-only step) if ``dim`` is given.
    """
    if noise_multiplier <= 0:
        raise PrivacyError("noise_multiplier must be positive")
    clipped = np.asarray(clipped)
    d = clipped.shape[1] if clipped.ndim == 2 and clipped.shape[1] else dim
    if not d:
        raise PrivacyError("empty gradient dimension")
    total = (clipped.sum(axis=0, dtype=np.float64) if clipped.size
             else np.zeros(d, dtype=np.float64))
    noise = rng.standard_normal(d) * (noise_multiplier * clip_norm)
    return ((total + noise) / expected_batch).astype(np.float32)


# -- RDP accounting ----------------------------------------------------------

def _rdp_orders(q: float, sigma: float, alphas: np.ndarray) -> np.ndarray:
    """Vectorised log-space series over integer orders; inf where it overflows."""
    a = alphas[:, None].astype(np.float64)
    j = np.arange(int(alphas.max()) + 1, dtype=np.float64)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        log_terms = (special.gammaln(a + 1) - special.gammaln(j + 1) - special.gammaln(a - j + 1)
                     + j * math.log(q) + (a - j) * math.log1p(-q)
                     + j * (j - 1) / (2.0 * sigma**2))
    log_terms = np.where(j <= a, log_terms, -np.inf)
    rho = special.logsumexp(log_terms, axis=1) / (alphas - 1.0)
    return np.where(np.isfinite(rho), np.maximum(rho, 0.0), np.inf)


def _check_q_sigma(q, sigma):
    if not 0 < q <= 1:
        raise PrivacyError("q must lie in (0, 1]")
    if sigma <= 0:
        raise PrivacyError("sigma must be positive")


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """RDP of order ``alpha`` for one step of the Poisson-subsampled Gaussian.

    ``1/(alpha-1) * log sum_j C(alpha,j) (1-q)^(alpha-j) q^j exp(j(j-1)/(2 sigma^2))``,
    summed in log space.
    """
    _check_q_sigma(q, sigma)
    if int(alpha) != alpha or alpha < 2:
        raise PrivacyError("alpha must be an integer >= 2")
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    rho = float(_rdp_orders(q, sigma, np.array([int(alpha)]))[0])
    if not math.isfinite(rho):
        raise OverflowError(f"RDP overflow at alpha={alpha}, sigma={sigma}")
    return rho


def rdp_curve(q: float, sigma: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    """Per-step RDP at every order; overflowing orders are ``inf``."""
    _check_q_sigma(q, sigma)
    alphas = np.asarray(orders, dtype=np.int64)
    if np.any(alphas < 2):
        raise PrivacyError("orders must be integers >= 2")
    if q == 1.0:
        return alphas / (2.0 * sigma**2)
    return _rdp_orders(q, sigma, alphas)


def eps_from_rdp_curve(rdp: np.ndarray, orders, delta: float) -> tuple[float, int]:
    orders_arr = np.asarray(orders, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        eps = rdp + math.log(1.0 / delta) / (orders_arr - 1.0)
    if not np.any(np.isfinite(eps)):
        raise PrivacyError("all RDP orders are non-finite")
    i = int(np.nanargmin(np.where(np.isfinite(eps), eps, np.inf)))
    return float(eps[i]), int(orders[i])


@dataclass
class AccountantState:
    """Composes identical subsampled-Gaussian steps over an integer order grid."""

    sampling_rate: float
    noise_multiplier: float
    steps: int = 0
    orders: tuple[int, ...] = DEFAULT_ORDERS
    _per_step: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self._per_step = rdp_curve(self.sampling_rate, self.noise_multiplier, self.orders)

    @property
    def rdp(self) -> np.ndarray:
        return self.steps * self._per_step

    def step(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError("cannot un-compose steps")
        self.steps += n

    def epsilon(self, delta: float) -> tuple[float, int]:
        return epsilon_from_rdp(self, delta)


def epsilon_from_rdp(state: AccountantState, delta: float) -> tuple[float, int]:
    """``min_alpha T*rho(alpha) + log(1/delta)/(alpha-1)`` and the minimising order.

    With no steps taken epsilon is reported as 0 (and a warning is logged).
    """
    if state.steps == 0:
        log.warning("no noisy steps taken; reporting epsilon = 0")
        return 0.0, int(state.orders[-1])
    return eps_from_rdp_curve(state.rdp, state.orders, delta)


def compute_epsilon(q: float, sigma: float, steps: int, delta: float,
                    orders=DEFAULT_ORDERS) -> tuple[float, int]:
    return epsilon_from_rdp(AccountantState(q, sigma, steps, tuple(orders)), delta)


def calibrate_sigma(target_epsilon: float, delta: float, q: float, steps: int,
                    bracket=SIGMA_BRACKET, tol: float = 1e-5,
                    orders=DEFAULT_ORDERS) -> float:
    """Smallest sigma in ``bracket`` whose epsilon does not exceed the target.

    Bisects to an absolute sigma tolerance ``tol`` (far inside the required
    1% epsilon agreement); epsilon is monotonically decreasing in sigma.
    """
    if target_epsilon <= 0:
        raise PrivacyError("target epsilon must be positive")
    lo, hi = bracket

    def eps(s):
        return compute_epsilon(q, s, steps, delta, orders)[0]

    e_lo, e_hi = eps(lo), eps(hi)
    if e_lo < e_hi:
        raise PrivacyError("epsilon is not decreasing in sigma over the bracket")
    if e_hi > target_epsilon:
        raise PrivacyError(f"target epsilon {target_epsilon} unreachable: "
                           f"sigma={hi} still gives {e_hi:.4g}")
    if e_lo <= target_epsilon:
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps(mid) > target_epsilon:
            lo = mid
        else:
            hi = mid
    return hi
