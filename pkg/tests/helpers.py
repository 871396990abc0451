"""Shared oracles for the test suite."""

import itertools
import math

import mpmath
import numpy as np
from scipy.optimize import linprog

from psrlab.nn import (Conv2d, Flatten, GlobalAvgPool, GroupNorm, Linear, MaxPool, Model, ReLU,
                       ResidualAdd, Tape, cross_entropy, cross_entropy_grad)

LAYER_KINDS = ["conv", "gn", "relu", "linear", "pool", "gap", "res"]


def loss_fn(model, x, y):
    return cross_entropy(model.forward(x), y)


def fd_param_grads(model: Model, x, y, h=1e-3, max_per_tensor=12, rng=None):
    """Central differences on a random subset of coordinates of every parameter."""
    rng = rng or np.random.default_rng(0)
    out = {}
    for name, t in model.params.items():
        flat = t.data.reshape(-1)
        idx = rng.choice(flat.size, min(max_per_tensor, flat.size), replace=False)
        vals = []
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(model, x, y)
            flat[i] = old - h
            down = loss_fn(model, x, y)
            flat[i] = old
            vals.append((up - down) / (2 * h))
        out[name] = (idx, np.array(vals))
    return out


def fd_input_grad(model, x, y, h=1e-3, n=20, rng=None, kink_tol=None):
    """Central differences on ``n`` random input coordinates.

    With ``kink_tol`` set, coordinates whose one-sided differences disagree by
    more than that (a ReLU or max-pool switch inside [x-h, x+h]) are dropped.
    """
    rng = rng or np.random.default_rng(1)
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = rng.choice(flat.size, min(n, flat.size), replace=False)
    base = loss_fn(model, x, y)
    keep, vals = [], []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = loss_fn(model, x, y)
        flat[i] = old - h
        down = loss_fn(model, x, y)
        flat[i] = old
        fwd, bwd = (up - base) / h, (base - down) / h
        if kink_tol is not None and abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-3):
            continue
        keep.append(i)
        vals.append((up - down) / (2 * h))
    return np.array(keep, dtype=np.int64), np.array(vals)


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def analytic_grads(model, x, y):
    tape = Tape()
    logits = model.forward(x, tape)
    grads, _ = model.backward(tape, cross_entropy_grad(logits, y), store=False)
    return grads


def layer_kind_model(kind):
    """A tiny float64 model exercising one layer kind, plus a batch."""
    rng_seed = {"conv": 1, "gn": 2, "relu": 3, "linear": 4, "pool": 5, "gap": 6, "res": 7}[kind]
    if kind == "conv":
        layers = [Conv2d("c", 2, 3, 3, 2, 1), Flatten("f"), Linear("l", 3 * 3 * 3, 3)]
        shape = (2, 5, 5)
    elif kind == "gn":
        layers = [Conv2d("c", 2, 4, 3, 1, 1), GroupNorm("g", 2, 4), Flatten("f"),
                  Linear("l", 4 * 16, 3)]
        shape = (2, 4, 4)
    elif kind == "relu":
        layers = [Flatten("f"), Linear("a", 8, 6), ReLU("r"), Linear("l", 6, 3)]
        shape = (2, 2, 2)
    elif kind == "linear":
        layers = [Flatten("f"), Linear("l", 8, 3)]
        shape = (2, 2, 2)
    elif kind == "pool":
        layers = [Conv2d("c", 1, 2, 3, 1, 1), MaxPool("p", 2), Flatten("f"), Linear("l", 8, 3)]
        shape = (1, 4, 4)
    elif kind == "gap":
        layers = [Conv2d("c", 1, 4, 3, 1, 1), GlobalAvgPool("g"), Linear("l", 4, 3)]
        shape = (1, 4, 4)
    else:
        layers = [Conv2d("c", 1, 2, 3, 1, 1), ReLU("r0"), Conv2d("c2", 2, 2, 3, 1, 1),
                  ResidualAdd("add", "r0"), GlobalAvgPool("g"), Linear("l", 2, 3)]
        shape = (1, 4, 4)
    m = Model.build(layers, shape, 3, seed=rng_seed).astype(np.float64)
    x = np.random.default_rng(rng_seed).random((3,) + shape)
    return m, x, np.array([0, 1, 2])


# -- attack oracles ----------------------------------------------------------------

def grid_radius(x, w, b, lo, hi, step=1e-3):
    """Smallest grid t whose ball-box contains a point of the hyperplane.

    Feasibility via enumeration of the corners of the (box ∩ ball) cuboid:
    a linear function hits 0 on a cuboid iff its corner values bracket 0.
    """
    d = len(x)
    signs = np.array(list(itertools.product([0, 1], repeat=d)))
    for t in np.arange(0, 1 + step, step):
        a, c = np.maximum(lo, x - t), np.minimum(hi, x + t)
        corners = np.where(signs == 0, a, c)
        vals = corners @ w + b
        if vals.min() <= 0 <= vals.max():
            return t
    return math.inf


def lp_radius(x, w, b, lo, hi):
    d = len(x)
    # variables (z, t): minimise t
    c = np.r_[np.zeros(d), 1.0]
    a_ub = np.block([[np.eye(d), -np.ones((d, 1))], [-np.eye(d), -np.ones((d, 1))]])
    b_ub = np.r_[x, -x]
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=np.r_[w, 0.0][None], b_eq=[-b],
                  bounds=[(l, h) for l, h in zip(lo, hi)] + [(0, None)], method="highs")
    return res.fun if res.success else math.inf


def linear_min_adv(W, bias, x, y):
    """Exact minimal L-inf distance to any class overtaking y, inside [0,1]^d."""
    best = math.inf
    for s in range(W.shape[0]):
        if s == y:
            continue
        w = W[s] - W[y]
        b = bias[s] - bias[y]
        d = len(x)
        c = np.r_[np.zeros(d), 1.0]
        a_ub = np.vstack([np.c_[np.eye(d), -np.ones(d)], np.c_[-np.eye(d), -np.ones(d)],
                          np.r_[-w, 0.0][None]])
        b_ub = np.r_[x, -x, b]
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=[(0, 1)] * d + [(0, None)],
                      method="highs")
        if res.success:
            best = min(best, res.fun)
    return best


# -- privacy oracle -----------------------------------------------------------------

def rdp_mpmath(q, sigma, alpha, dps=50):
    """Direct series summation in extended precision."""
    with mpmath.workdps(dps):
        q, s = mpmath.mpf(q), mpmath.mpf(sigma)
        total = mpmath.fsum(mpmath.binomial(alpha, j) * (1 - q) ** (alpha - j) * q ** j
                            * mpmath.exp(mpmath.mpf(j * (j - 1)) / (2 * s * s))
                            for j in range(alpha + 1))
        return mpmath.log(total) / (alpha - 1)
