"""Threat-model evaluation, the end-to-end pipeline and report emission."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dp
from .attacks import AttackConfig, budgeted, run_attack
from .config import Config
from .data import (DataSet, generate_synthetic, load_idx, save_idx, snap_to_byte_grid,
                   split_dataset)
from .federation import FederationConfig, TrainParams, run_federation, write_round_log
from .nn.checkpoint import load_model, save_model
from .nn.model import Model, accuracy
from .nn.zoo import build_model
from .quant import (QuantizedModel, calibrate_ranges, model_size_bytes, quantize_model)

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
CSV_HEADER = ["experiment", "attack", "threat", "clean_acc", "robust_acc_mean",
              "robust_acc_std", "eps", "size_before", "size_after"]
THREATS = ("whitebox", "transfer", "traintime")


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class ThreatModel:
    kind: str = "whitebox"
    generator: object | None = None  # Model, QuantizedModel or checkpoint path
    poison_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in THREATS:
            raise ValueError(f"unknown threat model {self.kind!r}")
        if self.kind == "transfer" and self.generator is None:
            raise ValueError("transfer threat needs a generator")

    def source(self, target):
        if self.kind != "transfer":
            return target
        gen = _load_any(self.generator) if isinstance(self.generator, (str, Path)) else self.generator
        if gen.arch != target.arch:
            raise ValueError(f"transfer needs a shared architecture: generator is {gen.arch!r}, "
                             f"target is {target.arch!r}")
        return gen


@dataclass
class RobustStats:
    clean_acc: float
    mean: float
    std: float
    values: list[float]

    @property
    def repeats(self) -> int:
        return len(self.values)


def _load_any(path):
    from .nn.checkpoint import load_tensors
    _, meta = load_tensors(path)
    if meta and meta.get("type") == "quantized":
        return QuantizedModel.load(path)
    return load_model(path)


def evaluate_robustness(target, test: DataSet, cfg: AttackConfig,
                        threat: ThreatModel | None = None, repeats: int = 10) -> RobustStats:
    """Mean and stddev of robust accuracy over ``repeats`` attacks seeded ``cfg.seed + k``.

    FAB results are cut to the budget: over-budget samples are submitted clean.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    threat = threat or ThreatModel()
    source = threat.source(target)
    x, y = test.images, test.labels
    clean = accuracy(target, x, y)
    values = []
    for k in range(repeats):
        batch = run_attack(source, x, y, cfg.with_seed(cfg.seed + k))
        x_adv = budgeted(batch, x, cfg.eps) if cfg.method == "fab" else batch.x_adv
        values.append(accuracy(target, x_adv, y))
    arr = np.asarray(values)
    std = float(arr.std(ddof=1)) if repeats > 1 else 0.0
    return RobustStats(clean, float(arr.mean()), std, values)


# -- report ----------------------------------------------------------------

@dataclass
class ReportRow:
    experiment: str
    attack: str
    threat: str
    target: str
    generator: str
    clean_acc: float
    robust_acc_mean: float
    robust_acc_std: float
    robust_acc_values: list[float]
    repeats: int
    eps: float
    size_before: int
    size_after: int
    flagged: bool = False  # robust exceeds clean beyond sampling noise


@dataclass
class RobustnessReport:
    experiment: str
    seed: int
    config: dict
    models: dict = field(default_factory=dict)
    rows: list[ReportRow] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        if not timings:
            d.pop("timings")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RobustnessReport:
        validate_report(d)
        return cls(d["experiment"], d["seed"], d["config"], d.get("models", {}),
                   [ReportRow(**r) for r in d["rows"]], d.get("timings", {}),
                   d["schema_version"])


_ROW_KEYS = {f for f in ReportRow.__dataclass_fields__}


def validate_report(d: dict) -> None:
    for key in ("schema_version", "experiment", "seed", "config", "rows"):
        if key not in d:
            raise ValueError(f"report lacks {key!r}")
    if d["schema_version"] != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {d['schema_version']}")
    for r in d["rows"]:
        if set(r) != _ROW_KEYS:
            raise ValueError(f"malformed report row: {sorted(set(r) ^ _ROW_KEYS)}")


def _flag(clean, mean, n):
    tol = 3.0 * math.sqrt(max(clean * (1 - clean), 0.25 / max(n, 1)) / max(n, 1))
    return bool(mean > clean + tol)


def dumps_report(report) -> str:
    d = report.to_dict() if isinstance(report, RobustnessReport) else report
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def csv_rows(report: RobustnessReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in report.rows:
        w.writerow([f"{r.experiment}/{r.target}", r.attack, r.threat, repr(r.clean_acc),
                    repr(r.robust_acc_mean), repr(r.robust_acc_std), repr(r.eps), r.size_before, r.size_after])
    return buf.getvalue()


def emit_report(report: RobustnessReport, path, fmt: str = "json") -> Path:
    path = Path(path)
    if fmt not in ("json", "csv"):
        raise ValueError(f"unknown report format {fmt!r}")
    validate_report(report.to_dict())
    text = dumps_report(report) if fmt == "json" else csv_rows(report)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


# -- transfer grid ---------------------------------------------------------

def _row(experiment, attack, threat, target_name, gen_name, stats, eps, sizes, n):
    return ReportRow(experiment, attack, threat, target_name, gen_name, stats.clean_acc,
                     stats.mean, stats.std, list(stats.values), stats.repeats, eps,
                     sizes[0], sizes[1], _flag(stats.clean_acc, stats.mean, n))


def run_transfer_eval(generators: dict, targets: dict, data: DataSet, cfg: AttackConfig,
                      repeats: int = 10, experiment: str = "transfer",
                      info: dict | None = None) -> list[ReportRow]:
    """One row per (generator, target) pair; ``generator is target`` reduces to white-box.

    ``generators`` and ``targets`` map names to models or checkpoint paths; ``info``
    optionally maps target names to {"epsilon", "size_before", "size_after"}.
    """
    info = info or {}
    rows = []
    for t_name, target in targets.items():
        target = _load_any(target) if isinstance(target, (str, Path)) else target
        meta = info.get(t_name, {})
        sizes = (meta.get("size_before", model_size_bytes(target)),
                 meta.get("size_after", model_size_bytes(target)))
        for g_name, gen in generators.items():
            stats = evaluate_robustness(target, data, cfg, ThreatModel("transfer", gen), repeats)
            rows.append(_row(experiment, cfg.method, f"transfer:{g_name}", t_name, g_name,
                             stats, meta.get("epsilon", 0.0), sizes, len(data)))
    return rows


# -- pipeline --------------------------------------------------------------

def prepare_data(cfg: Config) -> tuple[DataSet, DataSet, DataSet]:
    d = cfg.data
    if d.source == "synthetic":
        ds = generate_synthetic(d.n_classes, d.n_per_class, d.image_size, d.noise_level,
                                cfg.seed, d.jitter, 1, d.contrast, d.background)
    else:
        ds = load_idx(d.images, d.labels, d.n_classes)
    # snapped so that the IDX artifacts reload bit-exactly
    ds = snap_to_byte_grid(ds)
    tr, va, te = split_dataset(ds, tuple(d.splits), cfg.seed, require_val=cfg.quantize.enabled)
    if cfg.eval.n_samples is not None:
        te = te.subset(np.arange(min(cfg.eval.n_samples, len(te))))
    return tr, va, te


def save_splits(run_dir: Path, splits) -> None:
    for name, part in zip(("train", "val", "test"), splits):
        save_idx(part, run_dir / f"{name}-images.idx", run_dir / f"{name}-labels.idx")


def load_split(run_dir, name: str, n_classes: int) -> DataSet:
    run_dir = Path(run_dir)
    return load_idx(run_dir / f"{name}-images.idx", run_dir / f"{name}-labels.idx", n_classes)


def federation_config(cfg: Config, mode: str) -> FederationConfig:
    f, t = cfg.federation, cfg.training
    is_dp = "dp" in mode
    tp = (TrainParams(t.dp_lr, t.dp_momentum, t.dp_batch_size) if is_dp
          else TrainParams(t.lr, t.momentum, t.batch_size))
    return FederationConfig(f.n_clients, f.rounds, f.local_epochs, f.adversary_id,
                            f.poison_fraction, mode, f.adv_train_fraction, cfg.seed,
                            f.poison_refresh, f.poison_warmup_epochs, t.lr_decay, tp)


def privacy_spec(cfg: Config) -> dp.PrivacySpec:
    return dp.PrivacySpec(cfg.dp.clip_norm, cfg.dp.sigma, cfg.dp.delta, 1.0,
                          cfg.dp.target_epsilon)


def train_variant(cfg: Config, mode: str, train: DataSet, eval_set: DataSet | None = None):
    model = build_model(cfg.model.arch, train.image_shape, train.n_classes,
                        cfg.model.widths, cfg.seed)
    fc = federation_config(cfg, mode)
    return run_federation(fc, train, model, privacy_spec(cfg) if fc.uses_dp else None,
                          attack=cfg.attack.config("pgd", cfg.seed),
                          poison_attack=cfg.attack.config(cfg.attack.poison_method, cfg.seed),
                          eval_set=eval_set)


def quantize_checkpoint(model: Model, calib: DataSet, batch_size: int = 256):
    ranges = calibrate_ranges(model, calib, batch_size)
    q = quantize_model(model, ranges)
    before, after = model_size_bytes(model), model_size_bytes(q)
    return q, {"size_before": before, "size_after": after,
               "reduction_pct": 100.0 * (before - after) / before}


def _variant_name(mode: str) -> str:
    return mode.replace("+", "-")


class _Stage:
    def __init__(self, name, timings):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)

    def __exit__(self, et, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc


def run_pipeline(cfg: Config, run_dir) -> RobustnessReport:
    """Data, federated training per variant, quantization, evaluation, report.

    Every stage writes its artifacts to ``run_dir`` before the next starts.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    report = RobustnessReport(cfg.experiment, cfg.seed, cfg.to_dict())
    timings = report.timings
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    with _Stage("data", timings):
        train, val, test = prepare_data(cfg)
        save_splits(run_dir, (train, val, test))

    float_models: dict[str, Model] = {}
    with _Stage("train", timings):
        for mode in cfg.federation.variants:
            name = _variant_name(mode)
            res = train_variant(cfg, mode, train, eval_set=val)
            save_model(res.model, run_dir / f"{name}.psrl", {"epsilon": res.epsilon,
                                                              "mode": mode})
            write_round_log(res.logs, run_dir / f"{name}-rounds.csv")
            float_models[name] = res.model
            report.models[name] = {"mode": mode, "quantized": False, "epsilon": res.epsilon,
                                   "sigma": res.privacy.noise_multiplier if res.privacy else None,
                                   "size_bytes": model_size_bytes(res.model),
                                   "clean_acc": accuracy(res.model, test.images, test.labels)}

    targets = dict(float_models)
    if cfg.quantize.enabled:
        with _Stage("quantize", timings):
            for name, m in float_models.items():
                q, sizes = quantize_checkpoint(m, val, cfg.quantize.batch_size)
                q.save(run_dir / f"{name}-int8.psrl", {"epsilon": report.models[name]["epsilon"]})
                (run_dir / f"{name}-int8.json").write_text(json.dumps(sizes, sort_keys=True))
                targets[f"{name}-int8"] = q
                report.models[f"{name}-int8"] = {
                    **report.models[name], "quantized": True, "size_bytes": sizes["size_after"],
                    "clean_acc": accuracy(q, test.images, test.labels)}

    with _Stage("evaluate", timings):
        for t_name, target in targets.items():
            base = t_name.removesuffix("-int8")
            eps_dp = report.models[t_name]["epsilon"]
            sizes = (report.models[base]["size_bytes"], report.models[t_name]["size_bytes"])
            for method in cfg.attack.methods:
                acfg = cfg.attack.config(method, cfg.seed)
                for threat in cfg.eval.threats:
                    if threat == "transfer":
                        gens = {g: float_models[g] for g in float_models}
                        for g_name, gen in gens.items():
                            if gen is target:
                                continue
                            stats = evaluate_robustness(target, test, acfg,
                                                        ThreatModel("transfer", gen),
                                                        cfg.eval.repeats)
                            report.rows.append(_row(cfg.experiment, method, f"transfer:{g_name}",
                                                    t_name, g_name, stats, eps_dp, sizes,
                                                    len(test)))
                        continue
                    tm = ThreatModel(threat, poison_fraction=cfg.federation.poison_fraction)
                    stats = evaluate_robustness(target, test, acfg, tm, cfg.eval.repeats)
                    report.rows.append(_row(cfg.experiment, method, threat, t_name, t_name,
                                            stats, eps_dp, sizes, len(test)))

    with _Stage("report", timings):
        emit_report(report, run_dir / "report.json", "json")
        emit_report(report, run_dir / "report.csv", "csv")
    return report


def load_report(path) -> RobustnessReport:
    return RobustnessReport.from_dict(json.loads(Path(path).read_text()))
