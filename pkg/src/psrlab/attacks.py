"""L-infinity adversarial attacks: FGSM, PGD and FAB.

All attacks talk to the target through ``model.forward(x, tape)`` and
``model.backward(tape, ...)``, so float and fake-quantized models are
interchangeable. Every sample draws randomness from its own stream seeded by
``(seed, sample index, restart)``; batching never changes results.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .data import DataSet
from .nn.model import Tape, input_gradient, log_softmax, predict

log = logging.getLogger(__name__)

METHODS = ("fgsm", "pgd", "fab")
PAPER_FRACTIONS = (0.0, 0.1, 0.2, 0.3, 0.4)


class AttackError(RuntimeError):
    pass


def parse_budget(value) -> float:
    """Accept floats or rational strings such as ``"8/255"``."""
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    return float(value)


@dataclass(frozen=True)
class AttackConfig:
    method: str = "pgd"
    eps: float = 8 / 255
    step_size: float = 2 / 255
    n_steps: int = 10
    n_restarts: int | None = None
    seed: int = 0
    random_start: bool = True
    # FAB only
    alpha_max: float = 0.1
    eta: float = 1.05
    beta: float = 0.9
    refine_steps: int = 20

    def __post_init__(self):
        method = self.method.lower()
        object.__setattr__(self, "method", method)
        object.__setattr__(self, "eps", parse_budget(self.eps))
        object.__setattr__(self, "step_size", parse_budget(self.step_size))
        if method not in METHODS:
            raise ValueError(f"unknown attack {self.method!r}")
        if self.n_restarts is None:
            object.__setattr__(self, "n_restarts", 3 if method == "fab" else 1)
        if not 0 <= self.eps <= 1:
            raise ValueError("eps must lie in [0, 1]")
        if self.eps > 0 and not 0 < self.step_size <= self.eps:
            raise ValueError("step size must satisfy 0 < step <= eps")
        if self.n_steps < 0 or self.n_restarts < 1:
            raise ValueError("n_steps >= 0 and n_restarts >= 1 required")

    def with_seed(self, seed: int) -> AttackConfig:
        return replace(self, seed=int(seed))


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    indices: np.ndarray
    success: np.ndarray  # misclassified (and, for FAB, within budget)
    norms: np.ndarray  # achieved L-inf distance; inf where FAB found nothing

    def __len__(self):
        return len(self.indices)


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), int(stream)])


def _finish(model, x, x_adv, y, indices, budget=None) -> AdversarialBatch:
    pred = predict(model, x_adv)
    norms = np.abs(x_adv - x).reshape(len(x), -1).max(axis=1) if len(x) else np.zeros(0)
    success = pred != y
    if budget is not None:
        success &= norms <= budget + 1e-6
    return AdversarialBatch(x_adv.astype(np.float32), np.asarray(indices), success, norms)


def _indices(indices, n):
    return np.arange(n) if indices is None else np.asarray(indices, dtype=np.int64)


def _grad(model, x, y):
    g, logits = input_gradient(model, x, y)
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return g, logits


def _per_sample_loss(logits, y):
    return -log_softmax(logits)[np.arange(len(y)), y]


# -- FGSM / PGD --------------------------------------------------------------

def fgsm(model, x, y, eps, indices=None) -> AdversarialBatch:
    """One signed-gradient step of size ``eps``; ``sign(0) = 0``."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    eps = parse_budget(eps)
    idx = _indices(indices, len(x))
    if eps == 0 or len(x) == 0:
        return _finish(model, x, x.copy(), y, idx)
    g, _ = _grad(model, x, y)
    x_adv = np.clip(x + np.float32(eps) * np.sign(g), 0.0, 1.0).astype(np.float32)
    return _finish(model, x, x_adv, y, idx)


def _project(x_adv, x, eps):
    lo = np.maximum(x - eps, 0.0)
    hi = np.minimum(x + eps, 1.0)
    return np.minimum(np.maximum(x_adv, lo), hi).astype(np.float32)


def random_start(x, eps, seed, indices, stream=0):
    noise = np.stack([sample_rng(seed, i, stream).uniform(-eps, eps, x.shape[1:])
                      for i in indices]).astype(np.float32)
    return _project(x + noise, x, np.float32(eps))


def pgd(model, x, y, cfg: AttackConfig, indices=None) -> AdversarialBatch:
    """Projected signed-gradient ascent with random start; keeps the max-loss iterate."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    idx = _indices(indices, len(x))
    if len(x) == 0:
        return _finish(model, x, x.copy(), y, idx)
    eps, step = np.float32(cfg.eps), np.float32(cfg.step_size)
    best_x, best_loss = x.copy(), np.full(len(x), -np.inf)
    for r in range(cfg.n_restarts):
        xt = random_start(x, eps, cfg.seed, idx, r) if cfg.random_start and eps > 0 else x.copy()
        for t in range(cfg.n_steps + 1):
            g, logits = _grad(model, xt, y)
            loss = _per_sample_loss(logits, y)
            if not np.all(np.isfinite(loss)):
                raise AttackError("non-finite loss during PGD")
            better = loss > best_loss
            best_x[better], best_loss[better] = xt[better], loss[better]
            if t == cfg.n_steps:
                break
            xt = _project(xt + step * np.sign(g), x, eps)
    return _finish(model, x, best_x, y, idx)


# -- box-constrained minimal L-inf projection onto a hyperplane --------------

def project_box_hyperplane(x, w, b, lower=0.0, upper=1.0):
    """Minimal-L-inf point on ``{z : w.z + b = 0}`` inside ``[lower, upper]``.

    The residual ``w.x + b`` is driven to zero by moving every coordinate
    against it by ``min(t, room to the box)``; the smallest such ``t`` is found
    on the sorted breakpoints of that piecewise-linear reduction. Works
    row-wise on ``[N, d]`` inputs. Returns ``(z, t)`` and raises if any row is
    infeasible.
    """
    single = np.ndim(x) == 1
    z, t, feasible = _project_rows(np.atleast_2d(x), np.atleast_2d(w), np.atleast_1d(b),
                                   lower, upper)
    if np.any(~feasible):
        raise AttackError("hyperplane does not intersect the box (or w = 0)")
    return (z[0], float(t[0])) if single else (z, t)


def _project_rows(x, w, b, lower, upper):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lo = np.broadcast_to(np.asarray(lower, dtype=np.float64), x.shape)
    hi = np.broadcast_to(np.asarray(upper, dtype=np.float64), x.shape)
    c = np.einsum("nd,nd->n", w, x) + b
    # orient so that the residual c must be driven down to zero
    sgn = np.where(c < 0, -1.0, 1.0)[:, None]
    ws = w * sgn
    cs = np.abs(c)
    aw = np.abs(ws)
    room = np.where(ws > 0, x - lo, hi - x)
    room = np.where(aw > 0, np.maximum(room, 0.0), 0.0)
    order = np.argsort(room, axis=1, kind="stable")
    r_sorted = np.take_along_axis(room, order, axis=1)
    a_sorted = np.take_along_axis(aw, order, axis=1)
    total = aw.sum(axis=1)
    cum_w = np.cumsum(a_sorted, axis=1)
    cum_wr = np.cumsum(a_sorted * r_sorted, axis=1)
    reach = cum_wr + r_sorted * (total[:, None] - cum_w)  # reduction at each breakpoint
    feasible = (total > 0) & (reach[:, -1] >= cs - 1e-12 * np.maximum(1.0, cs))
    k = np.argmax(reach >= cs[:, None], axis=1)
    rows = np.arange(len(x))
    prev_wr = np.where(k > 0, cum_wr[rows, k - 1], 0.0)
    prev_w = np.where(k > 0, cum_w[rows, k - 1], 0.0)
    denom = total - prev_w
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(denom > 0, (cs - prev_wr) / denom, r_sorted[:, -1])
    t = np.where(cs == 0, 0.0, np.maximum(t, 0.0))
    t = np.where(feasible, t, np.inf)
    step = np.minimum(t[:, None], room)
    z = x - np.sign(ws) * step
    z = np.where(feasible[:, None], z, np.nan)
    return z, t, feasible


# -- FAB ------------------------------------------------------------------------

def _logits_and_boundary_grads(model, x, y):
    """Logits at ``x`` and input gradients of ``f_s - f_y`` for every class ``s``."""
    tape = Tape()
    logits = model.forward(x, tape)
    if not np.all(np.isfinite(logits)):
        raise AttackError("non-finite linearisation")
    n, k = logits.shape
    grads = np.empty((k,) + x.shape, dtype=np.float32)
    rows = np.arange(n)
    for s in range(k):
        gl = np.zeros_like(logits)
        gl[:, s] += 1.0
        gl[rows, y] -= 1.0
        _, dx = model.backward(tape, gl, param_grads=False, input_grad=True, store=False)
        grads[s] = dx
    return logits, grads


def _linf(a, b):
    return np.abs(a - b).reshape(len(a), -1).max(axis=1)


def _is_adv(model, x, y):
    return predict(model, x) != y


def _refine(model, x, x_best, y, found, steps):
    """Shrink each adversarial perturbation's L-inf radius by bisection."""
    if not np.any(found) or steps <= 0:
        return x_best
    sel = np.flatnonzero(found)
    xs, xb, ys = x[sel], x_best[sel], y[sel]
    delta = xb - xs
    lo = np.zeros(len(sel))
    hi = np.abs(delta).reshape(len(sel), -1).max(axis=1)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        r = mid.reshape((-1,) + (1,) * (x.ndim - 1)).astype(np.float32)
        cand = np.clip(xs + np.clip(delta, -r, r), 0.0, 1.0)
        ok = _is_adv(model, cand, ys)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    r = hi.reshape((-1,) + (1,) * (x.ndim - 1)).astype(np.float32)
    out = x_best.copy()
    out[sel] = np.clip(xs + np.clip(delta, -r, r), 0.0, 1.0)
    return out


def fab(model, x, y, cfg: AttackConfig, indices=None) -> AdversarialBatch:
    """Minimal-norm L-inf attack via repeated boundary linearisation and projection.

    Returns the smallest adversarial found across restarts; ``norms`` holds the
    achieved distance (``inf`` where nothing was found) and ``success`` marks
    samples fooled within ``cfg.eps``.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    idx = _indices(indices, len(x))
    n = len(x)
    if n == 0:
        return _finish(model, x, x.copy(), y, idx)
    d = x[0].size
    xf = x.reshape(n, d)
    best = x.copy()
    best_norm = np.full(n, np.inf)
    already = _is_adv(model, x, y)
    best_norm[already] = 0.0
    active = ~already
    for r in range(cfg.n_restarts):
        if not np.any(active):
            break
        if r == 0:
            xt = x.copy()
        else:
            rad = np.where(np.isfinite(best_norm), best_norm, cfg.eps) * 0.5
            noise = np.stack([sample_rng(cfg.seed, i, r).uniform(-1, 1, x.shape[1:])
                              for i in idx]).astype(np.float32)
            scale = np.abs(noise).reshape(n, -1).max(axis=1)
            noise *= (rad / np.maximum(scale, 1e-12)).reshape(-1, 1, 1, 1).astype(np.float32)
            xt = np.clip(x + noise, 0.0, 1.0)
        for _ in range(max(cfg.n_steps, 1)):
            logits, grads = _logits_and_boundary_grads(model, xt, y)
            k = logits.shape[1]
            xtf = xt.reshape(n, d).astype(np.float64)
            f_diff = logits - logits[np.arange(n), y][:, None]  # f_s - f_y
            # hyperplane per (sample, class): w.z + b = 0 with w = grad(f_s - f_y)
            w = grads.reshape(k, n, d).transpose(1, 0, 2).astype(np.float64)
            bias = f_diff.astype(np.float64) - np.einsum("nkd,nd->nk", w, xtf)
            flat_w = w.reshape(n * k, d)
            flat_b = bias.reshape(n * k)
            z_t, t_t, ok_t = _project_rows(np.repeat(xtf, k, axis=0), flat_w, flat_b, 0.0, 1.0)
            z_0, t_0, ok_0 = _project_rows(np.repeat(xf.astype(np.float64), k, axis=0),
                                           flat_w, flat_b, 0.0, 1.0)
            t_t = t_t.reshape(n, k)
            t_t[np.arange(n), y] = np.inf
            s_best = np.argmin(t_t, axis=1)
            sel = np.arange(n) * k + s_best
            feasible = np.isfinite(t_t[np.arange(n), s_best]) & ok_0[sel]
            if not np.any(feasible & active):
                break
            dist_t = t_t[np.arange(n), s_best]
            dist_0 = t_0[sel]
            delta_t = z_t[sel] - xtf
            delta_0 = z_0[sel] - xf
            with np.errstate(invalid="ignore", divide="ignore"):
                alpha = np.where(dist_t + dist_0 > 0, dist_t / (dist_t + dist_0), 0.0)
            alpha = np.minimum(alpha, cfg.alpha_max)[:, None]
            x_new = ((1 - alpha) * (xtf + cfg.eta * delta_t)
                     + alpha * (xf + cfg.eta * delta_0))
            x_new = np.clip(x_new, 0.0, 1.0).astype(np.float32).reshape(x.shape)
            upd = feasible & active
            x_next = np.where(upd.reshape(-1, 1, 1, 1), x_new, xt)
            adv = _is_adv(model, x_next, y) & upd
            norms = _linf(x_next, x)
            improve = adv & (norms < best_norm)
            best[improve], best_norm[improve] = x_next[improve], norms[improve]
            # backward step towards the original point for successful samples
            x_back = ((1 - cfg.beta) * x + cfg.beta * x_next).astype(np.float32)
            xt = np.where(adv.reshape(-1, 1, 1, 1), x_back, x_next)
    found = np.isfinite(best_norm) & (best_norm > 0)
    best = _refine(model, x, best, y, found, cfg.refine_steps)
    norms = np.where(np.isfinite(best_norm), _linf(best, x), np.inf)
    if not np.any(np.isfinite(norms)) and n:
        log.warning("FAB found no adversarial example in any restart")
    pred = predict(model, best)
    success = (pred != y) & (norms <= cfg.eps + 1e-6)
    return AdversarialBatch(best, idx, success, norms)


def budgeted(batch: AdversarialBatch, x, eps: float) -> np.ndarray:
    """Inputs an eps-bounded adversary would submit (clean where over budget)."""
    within = batch.norms <= eps + 1e-6
    return np.where(within.reshape((-1,) + (1,) * (x.ndim - 1)), batch.x_adv, x)


# -- dispatch and dataset crafting -----------------------------------------

def run_attack(model, x, y, cfg: AttackConfig, indices=None,
               batch_size: int = 256) -> AdversarialBatch:
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    idx = _indices(indices, len(x))
    parts = []
    for i in range(0, max(len(x), 1), batch_size):
        sl = slice(i, i + batch_size)
        if cfg.method == "fgsm":
            parts.append(fgsm(model, x[sl], y[sl], cfg.eps, idx[sl]))
        elif cfg.method == "pgd":
            parts.append(pgd(model, x[sl], y[sl], cfg, idx[sl]))
        else:
            parts.append(fab(model, x[sl], y[sl], cfg, idx[sl]))
    return AdversarialBatch(np.concatenate([p.x_adv for p in parts]),
                            np.concatenate([p.indices for p in parts]),
                            np.concatenate([p.success for p in parts]),
                            np.concatenate([p.norms for p in parts]))


def craft_adversarial_set(generator, dataset: DataSet, cfg: AttackConfig, fraction: float,
                          seed: int | None = None) -> tuple[DataSet, np.ndarray]:
    """Replace a seeded ``floor(fraction * N)`` subset with attacked versions.

    Poisoned labels are the generator's predictions on the perturbed inputs.
    Returns the poisoned dataset and the replaced indices.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    if not any(np.isclose(fraction, f) for f in PAPER_FRACTIONS):
        log.warning("poison fraction %g is outside the studied grid %s", fraction,
                    PAPER_FRACTIONS)
    if tuple(generator.input_shape) != dataset.image_shape:
        raise ValueError(f"generator expects {generator.input_shape}, "
                         f"data has {dataset.image_shape}")
    n_poison = int(np.floor(fraction * len(dataset) + 1e-9))
    if n_poison == 0:
        return dataset, np.zeros(0, dtype=np.int64)
    seed = cfg.seed if seed is None else seed
    chosen = np.sort(np.random.default_rng(seed).choice(len(dataset), n_poison, replace=False))
    x, y = dataset.images[chosen], dataset.labels[chosen]
    batch = run_attack(generator, x, y, cfg, indices=chosen)
    x_adv = batch.x_adv if cfg.method != "fab" else budgeted(batch, x, cfg.eps)
    new_labels = predict(generator, x_adv)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    images[chosen] = x_adv
    labels[chosen] = new_labels
    return dataset.replace(images=images, labels=labels), chosen


def adversarial_mix(model, x, y, cfg: AttackConfig, fraction: float, rng: np.random.Generator,
                    indices=None) -> tuple[np.ndarray, int]:
    """Replace ``round(fraction * B)`` random rows of a batch by attacked versions.

    Labels are kept (standard adversarial training). Returns the new batch and
    the number of adversarial rows.
    """
    b = len(x)
    n_adv = int(round(fraction * b))
    if n_adv == 0:
        return x, 0
    rows = np.sort(rng.choice(b, n_adv, replace=False))
    idx = _indices(indices, b)[rows]
    adv = run_attack(model, x[rows], y[rows], cfg, indices=idx).x_adv
    out = np.array(x, copy=True)
    out[rows] = adv
    return out, n_adv


__all__ = ["AttackConfig", "AdversarialBatch", "AttackError", "fgsm", "pgd", "fab",
           "project_box_hyperplane", "run_attack", "craft_adversarial_set", "adversarial_mix",
           "budgeted", "parse_budget"]
