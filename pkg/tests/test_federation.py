import csv

import numpy as np
import pytest

from psrlab import dp
from psrlab.attacks import AttackConfig
from psrlab.data import DataSet, generate_synthetic
from psrlab.federation import (FederationConfig, FederationError, TrainParams, client_rng,
                               fedavg, local_train, poison_client_data, run_federation,
                               write_round_log)
from psrlab.nn import loss_and_grads, micro_resnet9, predict, small_cnn
from psrlab.nn.optim import SGD


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(n_classes=4, n_per_class=25, image_size=8, seed=1)


def _cnn(seed=0):
    return small_cnn((1, 8, 8), 4, seed=seed)


def _same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


# -- local training --------------------------------------------------------------

def test_zero_epochs_leaves_weights_unchanged(tiny):
    m = _cnn()
    before = m.state()
    res = local_train(m, tiny, "standard", 0, TrainParams(), np.random.default_rng(0))
    assert res.steps == 0 and _same(before, res.state)


def test_mode_consistency_is_enforced(tiny):
    spec = dp.PrivacySpec(noise_multiplier=1.0, sampling_rate=0.5)
    with pytest.raises(ValueError):
        local_train(_cnn(), tiny, "dp", 1, TrainParams(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        local_train(_cnn(), tiny, "standard", 1, TrainParams(), np.random.default_rng(0),
                    privacy=spec)
    with pytest.raises(ValueError):
        local_train(_cnn(), tiny, "adversarial", 1, TrainParams(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        local_train(_cnn(), tiny, "sgd", 1, TrainParams(), np.random.default_rng(0))


def test_dp_clip_contract_holds_throughout(tiny):
    spec = dp.PrivacySpec(clip_norm=0.1, noise_multiplier=1.0, sampling_rate=0.25)
    acct = dp.AccountantState(0.25, 1.0)
    res = local_train(_cnn(), tiny, "dp", 2, TrainParams(lr=0.5, momentum=0.0), client_rng(0, 0, 0),
                      privacy=spec, accountant=acct, debug=True)
    assert res.noisy_steps == res.steps == 8 == acct.steps
    assert 0 < res.max_clipped_norm <= 0.1 + 1e-6


def test_adversarial_batches_carry_twenty_percent(tiny):
    res = local_train(_cnn(), tiny, "adversarial", 1, TrainParams(batch_size=50),
                      np.random.default_rng(0), attack=AttackConfig("fgsm"), adv_fraction=0.2)
    assert res.adversarial_per_batch == [10, 10]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_diagnostic(tiny):
    with pytest.raises(FederationError, match="diverged|non-finite"):
        local_train(_cnn(), tiny, "standard", 3, TrainParams(lr=1e30, momentum=0.0),
                    np.random.default_rng(0))


def test_local_training_is_deterministic(tiny):
    a = local_train(_cnn(), tiny, "standard", 1, TrainParams(), client_rng(3, 0, 1))
    b = local_train(_cnn(), tiny, "standard", 1, TrainParams(), client_rng(3, 0, 1))
    assert _same(a.state, b.state)


# -- aggregation -----------------------------------------------------------------

def test_fedavg_examples():
    assert fedavg([{"w": np.array([1.0])}, {"w": np.array([3.0])}], [5, 5])["w"][0] == 2.0
    assert fedavg([{"w": np.array([0.0])}, {"w": np.array([4.0])}], [100, 300])["w"][0] == 3.0
    same = {"w": np.arange(6.0).reshape(2, 3)}
    np.testing.assert_array_equal(fedavg([same, same, same], [1, 2, 3])["w"], same["w"])


def test_fedavg_errors():
    with pytest.raises(ValueError):
        fedavg([{"w": np.zeros(2)}, {"w": np.zeros(3)}], [1, 1])
    with pytest.raises(ValueError):
        fedavg([{"w": np.zeros(2)}, {"v": np.zeros(2)}], [1, 1])
    with pytest.raises(ValueError):
        fedavg([{"w": np.zeros(2)}, {"w": np.zeros(2)}], [0, 0])


# -- poisoning -------------------------------------------------------------------

def test_poison_counts_and_label_source():
    ds = generate_synthetic(n_per_class=50, seed=2)
    gen = micro_resnet9(seed=2)
    cfg = AttackConfig("pgd", n_steps=3, seed=0)
    poisoned = poison_client_data(ds, gen, cfg, 0.4, seed=0)
    changed = np.flatnonzero(np.any(poisoned.images != ds.images, axis=(1, 2, 3)))
    assert len(changed) <= 200
    # the replaced rows are exactly the seeded 200; labels are the generator's votes
    rows = np.sort(np.random.default_rng(0).choice(500, 200, replace=False))
    assert set(changed) <= set(rows)
    np.testing.assert_array_equal(poisoned.labels[rows], predict(gen, poisoned.images[rows]))
    keep = np.setdiff1d(np.arange(500), rows)
    np.testing.assert_array_equal(poisoned.labels[keep], ds.labels[keep])
    assert poison_client_data(ds, gen, cfg, 0.0) is ds


# -- federation ------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        FederationConfig(poison_fraction=0.5, adversary_id=1)
    with pytest.raises(ValueError):
        FederationConfig(poison_fraction=0.2)
    with pytest.raises(ValueError):
        FederationConfig(adversary_id=2)
    with pytest.raises(ValueError):
        FederationConfig(mode=["standard"])
    assert FederationConfig(mode=["dp", "standard"]).uses_dp


def test_single_client_equals_centralised_training(tiny):
    cfg = FederationConfig(n_clients=1, rounds=3, seed=7, train=TrainParams(lr=0.1, batch_size=16))
    got = run_federation(cfg, tiny, _cnn(1)).model.state()
    ref = _cnn(1)
    for r in range(3):
        rng = np.random.default_rng([7, 0, r, 0])
        opt = SGD(ref.params, 0.1 * (1 - r / 3), 0.9)
        perm = rng.permutation(len(tiny))
        for i in range(0, len(tiny), 16):
            idx = perm[i:i + 16]
            loss_and_grads(ref, tiny.images[idx], tiny.labels[idx])
            opt.step()
    assert _same(got, ref.state())


def test_fedavg_equals_full_batch_gradient_step(tiny):
    base = micro_resnet9((1, 8, 8), 4, widths=(4, 8), seed=3).astype(np.float64)
    tp = TrainParams(lr=0.1, momentum=0.0, batch_size=1000, local_steps=1)
    cfg = FederationConfig(n_clients=2, rounds=1, seed=0, lr_decay=False, train=tp)
    got = run_federation(cfg, tiny, base).model.state()
    ref = base.clone()
    _, grads = loss_and_grads(ref, tiny.images, tiny.labels, store=False)
    for k, g in grads.items():
        np.testing.assert_allclose(got[k], ref.params[k].data - 0.1 * g, rtol=0, atol=1e-6)


def test_zero_fraction_adversary_matches_benign(tiny):
    kw = dict(n_clients=2, rounds=2, seed=4, train=TrainParams(batch_size=16))
    a = run_federation(FederationConfig(**kw), tiny, _cnn(), eval_set=tiny)
    b = run_federation(FederationConfig(adversary_id=1, poison_fraction=0.0, **kw), tiny, _cnn(),
                       eval_set=tiny)
    assert _same(a.model.state(), b.model.state())
    assert [l.client_losses for l in a.logs] == [l.client_losses for l in b.logs]


def test_poisoned_federation_runs_and_differs(tiny):
    kw = dict(n_clients=2, rounds=2, seed=4, train=TrainParams(batch_size=16))
    benign = run_federation(FederationConfig(**kw), tiny, _cnn())
    pois = run_federation(FederationConfig(adversary_id=1, poison_fraction=0.4, **kw), tiny,
                          _cnn(), poison_attack=AttackConfig("fgsm"))
    assert not _same(benign.model.state(), pois.model.state())


def test_dp_federation_accounting(tiny, tmp_path):
    cfg = FederationConfig(n_clients=2, rounds=4, mode="dp", seed=0,
                           train=TrainParams(lr=0.5, momentum=0.0, batch_size=10))
    spec = dp.PrivacySpec(clip_norm=1.0, target_epsilon=3.4, delta=1e-3)
    res = run_federation(cfg, tiny, _cnn(), privacy=spec, eval_set=tiny, debug=True)
    eps = [l.epsilon for l in res.logs]
    assert all(a <= b for a, b in zip(eps, eps[1:])) and eps[0] > 0
    assert res.accounted_steps == res.noisy_steps == 2 * 4 * 5
    assert res.epsilon == eps[-1] <= 3.4 and res.epsilon >= 3.4 * 0.99
    assert res.max_clipped_norm <= 1.0 + 1e-6
    write_round_log(res.logs, tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["round", "client0_loss", "client1_loss", "clean_acc", "epsilon"]
    assert len(rows) == 5 and float(rows[-1][-1]) == eps[-1]


def test_mixed_modes_account_only_dp_clients(tiny):
    cfg = FederationConfig(n_clients=2, rounds=2, mode=["dp", "standard"], seed=0,
                           train=TrainParams(lr=0.5, momentum=0.0, batch_size=10))
    spec = dp.PrivacySpec(noise_multiplier=1.5, delta=1e-3)
    res = run_federation(cfg, tiny, _cnn(), privacy=spec)
    assert set(res.accountants) == {0} and res.accounted_steps == res.noisy_steps == 10


def test_dp_without_spec_rejected(tiny):
    with pytest.raises(ValueError):
        run_federation(FederationConfig(mode="dp"), tiny, _cnn())


def test_data_shapes_checked():
    ds = DataSet(np.zeros((4, 1, 4, 4), np.float32), np.array([0, 1, 0, 1]), 2)
    with pytest.raises(ValueError):
        run_federation(FederationConfig(n_clients=1, rounds=1), ds, _cnn())
