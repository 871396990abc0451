import numpy as np
import pytest

from psrlab.data import generate_synthetic, split_dataset
from psrlab.federation import FederationConfig, TrainParams, run_federation
from psrlab.nn import micro_resnet9


def train_desk_model(seed=0, n_per_class=150, rounds=8, adv_fraction=None):
    """Centralised (1-client) training on the desk-scale synthetic task."""
    ds = generate_synthetic(n_per_class=n_per_class, seed=seed)
    train, val, test = split_dataset(ds, (0.7, 0.1, 0.2), seed=seed)
    mode = "standard" if adv_fraction is None else "adversarial"
    cfg = FederationConfig(n_clients=1, rounds=rounds, mode=mode, seed=seed,
                           adv_train_fraction=adv_fraction or 0.2, train=TrainParams(lr=0.05))
    from psrlab.attacks import AttackConfig
    res = run_federation(cfg, train, micro_resnet9(seed=seed), attack=AttackConfig("pgd"))
    return res.model, (train, val, test)


@pytest.fixture(scope="session")
def desk():
    return train_desk_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
