"""Experiment configuration: one JSON document with sections
data, model, training, dp, attack, federation, quantize, eval."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attacks import AttackConfig, parse_budget

SEED_ENV = "PSR_SEED"


class ConfigError(ValueError):
    pass


def _build(cls, raw, section):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(extra)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass
class DataSection:
    source: str = "synthetic"  # or "idx"
    images: str | None = None
    labels: str | None = None
    n_classes: int = 10
    n_per_class: int = 400
    image_size: int = 16
    noise_level: float = 0.1
    contrast: float = 0.3
    background: float = 0.35
    jitter: int = 2
    splits: list[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ValueError("data.source must be 'synthetic' or 'idx'")
        if self.source == "idx" and not (self.images and self.labels):
            raise ValueError("idx source needs data.images and data.labels")


@dataclass
class ModelSection:
    arch: str = "micro-resnet-9"
    widths: list[int] | None = None


@dataclass
class TrainingSection:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    lr_decay: bool = True
    # DP-SGD is tuned separately: large batches, no momentum, larger steps
    dp_lr: float = 4.0
    dp_momentum: float = 0.0
    dp_batch_size: int = 128


@dataclass
class DPSection:
    clip_norm: float = 1.0
    delta: float = 1e-5
    target_epsilon: float | None = 3.4
    sigma: float | None = None

    def __post_init__(self):
        if self.sigma is not None and self.target_epsilon is not None:
            raise ValueError("dp.sigma and dp.target_epsilon are mutually exclusive")
        if self.sigma is None and self.target_epsilon is None:
            raise ValueError("dp needs sigma or target_epsilon")


@dataclass
class AttackSection:
    methods: list[str] = field(default_factory=lambda: ["pgd"])
    eps: float | str = "8/255"
    step_size: float | str = "2/255"
    n_steps: int = 10
    n_restarts: int | None = None
    poison_method: str = "pgd"

    def __post_init__(self):
        self.eps = parse_budget(self.eps)
        self.step_size = parse_budget(self.step_size)
        for m in self.methods:
            self.config(m)
        self.config(self.poison_method)

    def config(self, method: str, seed: int = 0) -> AttackConfig:
        restarts = self.n_restarts
        return AttackConfig(method, self.eps, min(self.step_size, self.eps) or self.step_size,
                            self.n_steps, restarts, seed)


@dataclass
class FederationSection:
    n_clients: int = 2
    rounds: int = 20
    local_epochs: int = 1
    adversary_id: int | None = None
    poison_fraction: float = 0.0
    mode: str | list[str] = "standard"
    adv_train_fraction: float = 0.2
    poison_refresh: int = 0
    poison_warmup_epochs: int = 1

    @property
    def variants(self) -> list[str]:
        """Training regimes to run; each applies to every client."""
        return [self.mode] if isinstance(self.mode, str) else list(self.mode)


@dataclass
class QuantizeSection:
    enabled: bool = True
    batch_size: int = 256


@dataclass
class EvalSection:
    repeats: int = 10
    threats: list[str] = field(default_factory=lambda: ["whitebox"])
    n_samples: int | None = None  # evaluate on the first n test samples

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("eval.repeats must be >= 1")
        for t in self.threats:
            if t not in ("whitebox", "transfer", "traintime"):
                raise ValueError(f"unknown threat {t!r}")


SECTIONS = {"data": DataSection, "model": ModelSection, "training": TrainingSection,
            "dp": DPSection, "attack": AttackSection, "federation": FederationSection,
            "quantize": QuantizeSection, "eval": EvalSection}


@dataclass
class Config:
    experiment: str = "psr"
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    dp: DPSection = field(default_factory=DPSection)
    attack: AttackSection = field(default_factory=AttackSection)
    federation: FederationSection = field(default_factory=FederationSection)
    quantize: QuantizeSection = field(default_factory=QuantizeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, raw: dict, env: dict | None = None) -> Config:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        extra = set(raw) - set(SECTIONS) - {"experiment", "seed"}
        if extra:
            raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
        kw = {name: _build(sec, raw.get(name), name) for name, sec in SECTIONS.items()}
        seed = raw.get("seed", 0)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                seed = int(env[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer") from exc
        return cls(experiment=str(raw.get("experiment", "psr")), seed=int(seed), **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path, env: dict | None = None) -> Config:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return Config.from_dict(raw, env)
