"""Single-process federated averaging with DP-SGD, adversarial training and a poisoning client."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dp
from .attacks import AttackConfig, adversarial_mix, craft_adversarial_set
from .data import DataSet, iterate_minibatches, partition_clients
from .nn.model import (Model, accuracy, cross_entropy, cross_entropy_grad, loss_and_grads,
                       per_sample_grads)
from .nn.optim import SGD
from .nn.tensor import DivergenceError

log = logging.getLogger(__name__)

MODES = ("standard", "dp", "adversarial", "dp+adversarial")


class FederationError(RuntimeError):
    pass


def client_rng(seed: int, client: int, round_: int, purpose: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(client), int(round_), int(purpose)])


@dataclass
class TrainParams:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    local_steps: int | None = None  # overrides epochs when set


@dataclass
class LocalResult:
    state: dict[str, np.ndarray]
    mean_loss: float
    steps: int
    noisy_steps: int = 0
    max_clipped_norm: float = 0.0
    adversarial_per_batch: list[int] = field(default_factory=list)


def _is_dp(mode):
    return mode in ("dp", "dp+adversarial")


def _is_adv(mode):
    return mode in ("adversarial", "dp+adversarial")


def local_train(model: Model, data: DataSet, mode: str, epochs: int, params: TrainParams,
                rng: np.random.Generator, privacy: dp.PrivacySpec | None = None,
                accountant: dp.AccountantState | None = None,
                attack: AttackConfig | None = None, adv_fraction: float = 0.2,
                debug: bool = False) -> LocalResult:
    """Train ``model`` in place on ``data`` and return its new weights.

    ``standard``: shuffled minibatch SGD. ``dp``: Poisson-sampled DP-SGD with
    ``params.batch_size / len(data)`` as the sampling rate. ``adversarial``:
    each batch carries ``round(adv_fraction * B)`` attacked rows with true labels.
    """
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    if _is_dp(mode) != (privacy is not None):
        raise ValueError("a privacy spec is required iff the mode includes dp")
    if _is_dp(mode) and (privacy.noise_multiplier is None or accountant is None):
        raise ValueError("dp mode needs a calibrated noise multiplier and an accountant")
    if _is_adv(mode) and attack is None:
        raise ValueError("adversarial mode needs an attack config")
    n = len(data)
    opt = SGD(model.params, params.lr, params.momentum)
    result = LocalResult(state={}, mean_loss=float("nan"), steps=0)
    losses = []

    def batches():
        if params.local_steps is not None:
            for _ in range(params.local_steps):
                yield (dp.poisson_sample_batch(n, privacy.sampling_rate, rng) if _is_dp(mode)
                       else np.sort(rng.choice(n, min(params.batch_size, n), replace=False)))
            return
        for _ in range(epochs):
            if _is_dp(mode):
                for _ in range(max(1, int(round(1.0 / privacy.sampling_rate)))):
                    yield dp.poisson_sample_batch(n, privacy.sampling_rate, rng)
            else:
                yield from iterate_minibatches(n, params.batch_size, rng)

    for idx in batches():
        x, y = data.images[idx], data.labels[idx]
        if _is_adv(mode) and len(idx):
            x, n_adv = adversarial_mix(model, x, y, attack.with_seed(int(rng.integers(2**31))),
                                       adv_fraction, rng, indices=idx)
            result.adversarial_per_batch.append(n_adv)
        try:
            if _is_dp(mode):
                loss = _dp_step(model, opt, x, y, privacy, n, rng, result, debug)
                accountant.step()
                result.noisy_steps += 1
            else:
                loss, _ = loss_and_grads(model, x, y)
                opt.step()
        except DivergenceError as exc:
            raise FederationError(f"local training diverged at step {result.steps}: {exc}")
        if loss is not None:
            if not np.isfinite(loss):
                raise FederationError(f"non-finite loss at step {result.steps}")
            losses.append(loss)
        result.steps += 1
    result.state = model.state()
    result.mean_loss = float(np.mean(losses)) if losses else float("nan")
    return result


def _dp_step(model, opt, x, y, privacy, n, rng, result, debug):
    names = model.param_names()
    shapes = {k: model.params[k].shape for k in names}
    dim = sum(int(np.prod(s)) for s in shapes.values())
    loss = None
    if len(y):
        grads, logits = per_sample_grads(model, x, y)
        loss = cross_entropy(logits, y)
        clipped = dp.clip_per_sample(dp.flatten_per_sample(grads, names), privacy.clip_norm)
        norms = dp.per_sample_norms(clipped)
        result.max_clipped_norm = max(result.max_clipped_norm, float(norms.max()))
        if debug:
            assert norms.max() <= privacy.clip_norm + 1e-6, "clipping invariant violated"
    else:
        clipped = np.zeros((0, dim), dtype=np.float32)
    noisy = dp.noisy_aggregate(clipped, privacy.noise_multiplier, privacy.clip_norm,
                               n * privacy.sampling_rate, rng, dim=dim)
    opt.step(dp.unflatten(noisy, shapes))
    return loss


def fedavg(states: list[dict[str, np.ndarray]], sizes) -> dict[str, np.ndarray]:
    """Parameter-wise mean weighted by client dataset size."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(states) != len(sizes) or not states:
        raise ValueError("need one size per client state")
    if sizes.sum() <= 0:
        raise ValueError("total client size is zero")
    keys = list(states[0])
    for s in states[1:]:
        if list(s) != keys or any(s[k].shape != states[0][k].shape for k in keys):
            raise ValueError("client parameter shapes are not congruent")
    w = sizes / sizes.sum()
    out = {}
    for k in keys:
        acc = np.zeros(states[0][k].shape, dtype=np.float64)
        for wi, s in zip(w, states):
            acc += wi * s[k]
        out[k] = acc.astype(states[0][k].dtype)
    return out


def poison_client_data(client_data: DataSet, generator, attack: AttackConfig, fraction: float,
                       seed: int | None = None) -> DataSet:
    poisoned, _ = craft_adversarial_set(generator, client_data, attack, fraction, seed=seed)
    return poisoned


@dataclass
class FederationConfig:
    n_clients: int = 2
    rounds: int = 20
    local_epochs: int = 1
    adversary_id: int | None = None
    poison_fraction: float = 0.0
    mode: str | list[str] = "standard"
    adv_train_fraction: float = 0.2
    seed: int = 0
    poison_refresh: int = 0  # rounds between re-crafting the poison; 0 = craft once
    poison_warmup_epochs: int = 1
    lr_decay: bool = True
    train: TrainParams = field(default_factory=TrainParams)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainParams(**self.train)
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.adversary_id is not None and not 0 <= self.adversary_id < self.n_clients:
            raise ValueError("adversary_id must index a client")
        if not 0 <= self.poison_fraction <= 0.4:
            raise ValueError("poison_fraction must lie in [0, 0.4]")
        if self.poison_fraction > 0 and self.adversary_id is None:
            raise ValueError("poison_fraction > 0 requires adversary_id")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}")
        if len(self.modes) != self.n_clients:
            raise ValueError("need one mode per client")

    @property
    def modes(self) -> list[str]:
        if isinstance(self.mode, str):
            return [self.mode] * self.n_clients
        return list(self.mode)

    @property
    def uses_dp(self) -> bool:
        return any(_is_dp(m) for m in self.modes)


@dataclass
class RoundLog:
    round: int
    client_losses: list[float]
    clean_acc: float
    epsilon: float


@dataclass
class FederationResult:
    model: Model
    logs: list[RoundLog]
    accountants: dict[int, dp.AccountantState]
    privacy: dp.PrivacySpec | None
    noisy_steps: int = 0
    max_clipped_norm: float = 0.0

    @property
    def epsilon(self) -> float:
        if not self.accountants or self.privacy is None:
            return 0.0
        return max(a.epsilon(self.privacy.delta)[0] for a in self.accountants.values())

    @property
    def accounted_steps(self) -> int:
        return sum(a.steps for a in self.accountants.values())


def dp_steps_per_client(cfg: FederationConfig, shard_size: int) -> tuple[float, int]:
    """Sampling rate and total noisy steps a DP client will take."""
    q = min(1.0, cfg.train.batch_size / shard_size)
    if cfg.train.local_steps is not None:
        per_round = cfg.train.local_steps
    else:
        per_round = cfg.local_epochs * max(1, int(round(1.0 / q)))
    return q, per_round * cfg.rounds


def resolve_privacy(cfg: FederationConfig, shard_size: int, privacy: dp.PrivacySpec
                    ) -> dp.PrivacySpec:
    """Fix the sampling rate and, if a target epsilon is given, calibrate sigma."""
    q, steps = dp_steps_per_client(cfg, shard_size)
    sigma = privacy.noise_multiplier
    if sigma is None:
        if privacy.target_epsilon is None:
            raise ValueError("dp needs either a noise multiplier or a target epsilon")
        sigma = dp.calibrate_sigma(privacy.target_epsilon, privacy.delta, q, steps)
    resolved = dp.PrivacySpec(privacy.clip_norm, sigma, privacy.delta, q)
    resolved.check_delta(shard_size)
    return resolved


def run_federation(cfg: FederationConfig, dataset: DataSet, model: Model,
                   privacy: dp.PrivacySpec | None = None, attack: AttackConfig | None = None,
                   poison_attack: AttackConfig | None = None, eval_set: DataSet | None = None,
                   debug: bool = False) -> FederationResult:
    """Broadcast, train locally, average; repeated for ``cfg.rounds``.

    ``model`` is the initial global model (not modified). ``attack`` drives
    adversarial training, ``poison_attack`` the train-time adversary.
    """
    shards = partition_clients(dataset, cfg.n_clients, cfg.seed)
    sizes = [len(s) for s in shards]
    resolved = None
    if cfg.uses_dp:
        if privacy is None:
            raise ValueError("dp mode requested without a privacy spec")
        resolved = {i: resolve_privacy(cfg, sizes[i], privacy)
                    for i, m in enumerate(cfg.modes) if _is_dp(m)}
    accountants = {i: dp.AccountantState(p.sampling_rate, p.noise_multiplier)
                   for i, p in (resolved or {}).items()}
    global_state = model.state()
    poisoned = dict(enumerate(shards))
    adv = cfg.adversary_id if cfg.poison_fraction > 0 else None
    poison_cfg = poison_attack or AttackConfig("pgd")
    local_models = [model.clone() for _ in range(cfg.n_clients)]

    if adv is not None:
        gen = local_models[adv]
        if cfg.poison_warmup_epochs > 0:
            local_train(gen, shards[adv], "standard", cfg.poison_warmup_epochs, cfg.train,
                        client_rng(cfg.seed, adv, 0, 1))
        poisoned[adv] = poison_client_data(shards[adv], gen, poison_cfg, cfg.poison_fraction,
                                           seed=cfg.seed)

    logs: list[RoundLog] = []
    noisy = 0
    max_norm = 0.0
    global_model = model.clone()
    for r in range(cfg.rounds):
        lr = cfg.train.lr * (1.0 - r / cfg.rounds) if cfg.lr_decay else cfg.train.lr
        tp = TrainParams(lr, cfg.train.momentum, cfg.train.batch_size, cfg.train.local_steps)
        if adv is not None and cfg.poison_refresh and r > 0 and r % cfg.poison_refresh == 0:
            poisoned[adv] = poison_client_data(shards[adv], local_models[adv], poison_cfg,
                                               cfg.poison_fraction, seed=cfg.seed + r)
        states, losses = [], []
        for i in range(cfg.n_clients):
            local = local_models[i]
            local.load_state(global_state)
            mode = cfg.modes[i]
            res = local_train(local, poisoned[i], mode, cfg.local_epochs, tp,
                              client_rng(cfg.seed, i, r),
                              privacy=resolved.get(i) if resolved else None,
                              accountant=accountants.get(i), attack=attack,
                              adv_fraction=cfg.adv_train_fraction, debug=debug)
            states.append(res.state)
            losses.append(res.mean_loss)
            noisy += res.noisy_steps
            max_norm = max(max_norm, res.max_clipped_norm)
        global_state = fedavg(states, sizes)
        global_model.load_state(global_state)
        acc = accuracy(global_model, eval_set.images, eval_set.labels) if eval_set else float("nan")
        eps = (max(a.epsilon(resolved[i].delta)[0] for i, a in accountants.items())
               if accountants else 0.0)
        logs.append(RoundLog(r, losses, acc, eps))
        log.info("round %d: losses=%s acc=%.4f eps=%.3f", r, np.round(losses, 4), acc, eps)
    result = FederationResult(global_model, logs, accountants,
                              next(iter(resolved.values())) if resolved else None, noisy,
                              max_norm)
    if result.accounted_steps != noisy:
        raise FederationError("accounted steps do not match noisy aggregations")
    return result


def write_round_log(logs: list[RoundLog], path) -> None:
    n = max((len(l.client_losses) for l in logs), default=0)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round"] + [f"client{i}_loss" for i in range(n)] + ["clean_acc", "epsilon"])
        for l in logs:
            w.writerow([l.round] + [repr(float(v)) for v in l.client_losses]
                       + [repr(float(l.clean_acc)), repr(float(l.epsilon))])


def round_log_dicts(logs: list[RoundLog]) -> list[dict]:
    return [asdict(l) for l in logs]


__all__ = ["FederationConfig", "TrainParams", "RoundLog", "FederationResult", "local_train",
           "fedavg", "poison_client_data", "run_federation", "write_round_log",
           "cross_entropy_grad"]
