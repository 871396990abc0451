import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import (LAYER_KINDS, analytic_grads, fd_input_grad, fd_param_grads,
                     layer_kind_model, rel_err)
from psrlab.nn import (SGD, DivergenceError, Flatten, GroupNorm, Linear, Model, ReLU, Tape,
                       TapeError, Tensor, cross_entropy, input_gradient, linear_classifier,
                       loss_and_grads, micro_resnet9, micro_resnet18, sgd_step, small_cnn)
from psrlab.nn import layers as L
from psrlab.nn.checkpoint import CheckpointError, decode, encode, load_model, save_model


# -- scalar reference evaluator ----------------------------------------------

def scalar_small_cnn(model, x):
    w, b = model.params["conv.weight"].data, model.params["conv.bias"].data
    fw, fb = model.params["fc.weight"].data, model.params["fc.bias"].data
    bsz, c, h, wd = x.shape
    co = w.shape[0]
    out = np.zeros((bsz, fw.shape[0]))
    for n in range(bsz):
        act = np.zeros((co, h, wd))
        for o in range(co):
            for i in range(h):
                for j in range(wd):
                    s = float(b[o])
                    for ci in range(c):
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < h and 0 <= jj < wd:
                                    s += float(w[o, ci, di, dj]) * float(x[n, ci, ii, jj])
                    act[o, i, j] = max(s, 0.0)
        flat = act.reshape(-1)
        for k in range(fw.shape[0]):
            out[n, k] = float(fb[k]) + sum(float(fw[k, t]) * flat[t] for t in range(flat.size))
    return out


def test_forward_matches_scalar_evaluator():
    m = small_cnn((2, 5, 5), 3, channels=3, seed=4)
    x = np.random.default_rng(0).random((2, 2, 5, 5)).astype(np.float32)
    assert rel_err(m.forward(x), scalar_small_cnn(m, x), floor=1e-3) <= 1e-5


def test_identity_linear_passes_input_through():
    m = linear_classifier(np.eye(4))
    x = np.random.default_rng(1).random((3, 1, 1, 4)).astype(np.float32)
    np.testing.assert_array_equal(m.forward(x), x.reshape(3, 4))


def test_zero_weights_give_zero_logits_and_zero_input_grad():
    m = micro_resnet9(seed=0)
    m.load_state({k: np.zeros_like(v) for k, v in m.state().items()})
    x = np.random.default_rng(2).random((4, 1, 16, 16)).astype(np.float32)
    assert np.all(m.forward(x) == 0)
    dx, _ = input_gradient(m, x, np.array([0, 1, 2, 3]))
    assert np.all(dx == 0)


def test_forward_rejects_wrong_shape_and_nonfinite():
    m = small_cnn()
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 1, 7, 7), np.float32))
    bad = np.zeros((1, 1, 8, 8), np.float32)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises((ValueError, DivergenceError)):
        m.forward(bad)


def test_forward_is_pure():
    m = micro_resnet9(seed=3)
    x = np.random.default_rng(3).random((5, 1, 16, 16)).astype(np.float32)
    a, b = m.forward(x), m.forward(x)
    assert np.array_equal(a, b)


# -- cross entropy -------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    assert cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9])) == pytest.approx(math.log(10),
                                                                               abs=1e-12)


def test_cross_entropy_large_margin_is_zero():
    logits = np.zeros((2, 5))
    logits[[0, 1], [1, 3]] = 30.0
    assert cross_entropy(logits, np.array([1, 3])) == pytest.approx(0.0, abs=1e-9 + 4 * math.exp(-30))


def test_cross_entropy_matches_mpmath():
    rng = np.random.default_rng(5)
    logits = rng.normal(0, 3, (4, 3))
    labels = rng.integers(0, 3, 4)
    mpmath.mp.dps = 40
    ref = sum(-(mpmath.mpf(logits[i, labels[i]])
                - mpmath.log(sum(mpmath.e ** mpmath.mpf(v) for v in logits[i])))
              for i in range(4)) / 4
    assert abs(cross_entropy(logits, labels) - float(ref)) / float(ref) <= 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), np.array([-1]))


# -- backward ------------------------------------------------------------------

def test_backward_without_tape_raises():
    m = small_cnn()
    with pytest.raises(TapeError):
        m.backward(Tape(), np.zeros((1, 3)))


def test_linear_gradient_matches_analytic():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(3, 4)).astype(np.float32)
    m = linear_classifier(w)
    x = rng.random((1, 1, 1, 4)).astype(np.float32)
    g = analytic_grads(m, x, np.array([2]))
    z = w @ x.reshape(4)
    p = np.exp(z - z.max())
    p /= p.sum()
    p[2] -= 1
    assert rel_err(g["fc.weight"], np.outer(p, x.reshape(4))) <= 1e-5
    assert rel_err(g["fc.bias"], p) <= 1e-5


def test_unused_parameter_has_zero_gradient():
    # zeroed downstream weights cut every path from "a" to the loss
    layers = [Flatten("f"), Linear("a", 4, 2), ReLU("r"), Linear("b", 2, 2)]
    m = Model.build(layers, (1, 1, 4), 2, seed=0)
    m.params["b.weight"].data[:] = 0
    g = analytic_grads(m, np.ones((2, 1, 1, 4), np.float32), np.array([0, 1]))
    assert np.all(g["a.weight"] == 0) and np.all(g["a.bias"] == 0)


def test_linear_input_gradient_exact():
    w = np.array([[0.5, -1.0, 2.0]], np.float32)
    m = linear_classifier(np.vstack([w, -w]))
    x = np.array([[[[0.1, 0.2, 0.3]]]], np.float32)
    dx, logits = input_gradient(m, x, np.array([0]))
    z = logits[0]
    p = np.exp(z - z.max())
    p /= p.sum()
    expected = (p - np.array([1.0, 0.0])) @ np.vstack([w, -w])
    np.testing.assert_allclose(dx.reshape(3), expected, rtol=1e-6)


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_gradients_match_finite_differences(kind):
    m, x, y = layer_kind_model(kind)
    g = analytic_grads(m, x, y)
    for name, (idx, num) in fd_param_grads(m, x, y).items():
        assert rel_err(g[name].reshape(-1)[idx], num) <= 1e-3, name
    idx, num = fd_input_grad(m, x, y)
    dx, _ = input_gradient(m, x, y)
    assert rel_err(dx.reshape(-1)[idx], num) <= 1e-3


def test_micro_resnet_input_gradient_finite_differences():
    m = micro_resnet9(seed=2).astype(np.float64)
    x = np.random.default_rng(8).random((2, 1, 16, 16))
    y = np.array([1, 7])
    idx, num = fd_input_grad(m, x, y, n=40, kink_tol=0.05)
    assert len(idx) >= 20
    dx, _ = input_gradient(m, x, y)
    assert rel_err(dx.reshape(-1)[idx], num) <= 1e-3


def test_per_sample_grads_sum_to_batch_grad():
    from psrlab.nn import per_sample_grads
    m = micro_resnet9(seed=1)
    x = np.random.default_rng(9).random((4, 1, 16, 16)).astype(np.float32)
    y = np.array([0, 1, 2, 3])
    ps, _ = per_sample_grads(m, x, y)
    _, g = loss_and_grads(m, x, y, store=False)
    for k in g:
        np.testing.assert_allclose(ps[k].sum(0) / 4, g[k], rtol=1e-4, atol=1e-6)


# -- group norm ----------------------------------------------------------------

def test_group_norm_normalizes():
    gn = GroupNorm("g", 2, 4)
    x = np.random.default_rng(10).normal(3, 5, (3, 4, 5, 5)).astype(np.float32)
    out = gn.forward(x, gn.init_params(np.random.default_rng(0)), {})
    grp = out.reshape(3, 2, -1).astype(np.float64)
    assert np.abs(grp.mean(-1)).max() <= 1e-5
    assert np.all(np.abs(grp.var(-1) - 1) <= 1e-3)


def test_group_norm_constant_input_gives_beta():
    gn = GroupNorm("g", 2, 4)
    p = {"weight": np.full(4, 2.0, np.float32), "bias": np.array([1, 2, 3, 4], np.float32)}
    out = gn.forward(np.full((1, 4, 3, 3), 0.7, np.float32), p, {})
    np.testing.assert_allclose(out[0, :, 0, 0], [1, 2, 3, 4], atol=1e-6)


def test_group_norm_matches_scalar_reference():
    gn = GroupNorm("g", 2, 4)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 4, 3, 3)).astype(np.float32)
    p = {"weight": rng.normal(size=4).astype(np.float32),
         "bias": rng.normal(size=4).astype(np.float32)}
    out = gn.forward(x, p, {})
    ref = np.zeros_like(out, dtype=np.float64)
    for n in range(2):
        for g in range(2):
            vals = [float(v) for v in x[n, 2 * g:2 * g + 2].reshape(-1)]
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            for c in range(2 * g, 2 * g + 2):
                ref[n, c] = (x[n, c] - mu) / math.sqrt(var + gn.eps) * p["weight"][c] + p["bias"][c]
    assert rel_err(out, ref, floor=1e-3) <= 1e-5


def test_group_norm_indivisible_channels():
    with pytest.raises(ValueError):
        GroupNorm("g", 3, 4)


def test_no_batchnorm_kind():
    assert not any("batch" in k for k in L.LAYER_KINDS)
    with pytest.raises((KeyError, ValueError)):
        L.layer_from_dict({"kind": "batchnorm", "name": "bn"})


# -- optimizer -----------------------------------------------------------------

def test_sgd_zero_gradient_no_change():
    p = {"w": Tensor(np.array([1.0, 2.0], np.float32))}
    sgd_step(p, {"w": np.zeros(2, np.float32)}, 0.1, 0.9)
    np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])


def test_sgd_arithmetic():
    p = {"w": Tensor(np.array([1.0], np.float32))}
    sgd_step(p, {"w": np.array([0.5], np.float32)}, 0.1, 0.0)
    assert p["w"].data[0] == pytest.approx(0.95)


def test_sgd_momentum_unrolled():
    p = {"w": Tensor(np.array([1.0], np.float64))}
    opt = SGD(p, 0.1, 0.9)
    opt.step({"w": np.array([0.5])})
    opt.step({"w": np.array([0.2])})
    v1 = 0.5
    v2 = 0.9 * v1 + 0.2
    assert p["w"].data[0] == pytest.approx(1.0 - 0.1 * v1 - 0.1 * v2, abs=1e-12)


def test_sgd_validation():
    p = {"w": Tensor(np.zeros(2, np.float32))}
    with pytest.raises(ValueError):
        SGD(p, 0.0)
    with pytest.raises(ValueError):
        SGD(p, 0.1, 1.0)
    with pytest.raises(ValueError):
        SGD(p, 0.1).step({"w": np.zeros(3, np.float32)})


def test_training_is_deterministic():
    def run():
        m = micro_resnet9(seed=5)
        opt = SGD(m.params, 0.05, 0.9)
        rng = np.random.default_rng(0)
        for _ in range(3):
            x = rng.random((8, 1, 16, 16)).astype(np.float32)
            loss_and_grads(m, x, rng.integers(0, 10, 8))
            opt.step()
        return m.state()
    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


# -- model container -----------------------------------------------------------

def test_duplicate_names_rejected():
    with pytest.raises(ValueError):
        Model.build([Flatten("x"), Linear("x", 4, 2)], (1, 2, 2), 2)


def test_micro_architectures():
    m9, m18 = micro_resnet9(), micro_resnet18()
    x = np.zeros((2, 1, 16, 16), np.float32)
    assert m9.forward(x).shape == (2, 10) and m18.forward(x).shape == (2, 10)
    assert m9.arch == "micro-resnet-9"
    gns = [l for l in m18.layers if isinstance(l, GroupNorm)]
    assert all(l.groups == min(8, l.channels) for l in gns)


def test_tensor_rejects_nonfinite():
    with pytest.raises(DivergenceError):
        Tensor(np.array([1.0, np.inf], np.float32))


# -- checkpoint container ------------------------------------------------------

def test_checkpoint_layout_is_exact():
    blob = encode({"ab": np.array([1.5], np.float32), "q": np.array([[-1, 2]], np.int8)})
    expected = (b"PSRL" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + (2).to_bytes(2, "little") + b"ab" + bytes([0, 1]) + (1).to_bytes(4, "little")
                + np.array([1.5], "<f4").tobytes()
                + (1).to_bytes(2, "little") + b"q" + bytes([1, 2]) + (1).to_bytes(4, "little")
                + (2).to_bytes(4, "little") + np.array([-1, 2], np.int8).tobytes())
    assert blob == expected
    version, tensors = decode(blob)
    assert version == 1 and tensors["q"].dtype == np.int8


def test_checkpoint_rejects_bad_input():
    with pytest.raises(CheckpointError):
        decode(b"XXXX" + bytes(8))
    blob = encode({"a": np.ones(4, np.float32)})
    with pytest.raises(CheckpointError):
        decode(blob[:-2])


def test_model_checkpoint_roundtrip(tmp_path):
    m = micro_resnet18(seed=3)
    save_model(m, tmp_path / "m.psrl")
    m2 = load_model(tmp_path / "m.psrl")
    x = np.random.default_rng(0).random((2, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(m.forward(x), m2.forward(x))
    assert m2.arch == m.arch


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       st.lists(st.floats(-1e6, 1e6, width=32), min_size=0, max_size=6),
                       max_size=4))
def test_checkpoint_roundtrip_property(d):
    tensors = {k: np.array(v, np.float32) for k, v in d.items()}
    _, out = decode(encode(tensors))
    assert set(out) == set(tensors)
    for k in tensors:
        assert np.array_equal(out[k], tensors[k])
