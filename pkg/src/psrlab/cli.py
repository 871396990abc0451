"""``psr-lab`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dp
from .attacks import AttackConfig, budgeted, parse_budget, run_attack
from .config import Config, ConfigError, load_config
from .data import load_idx
from .nn.checkpoint import save_model, save_tensors
from .nn.model import accuracy

log = logging.getLogger("psrlab")


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _config(args) -> Config:
    return load_config(args.config) if getattr(args, "config", None) else Config.from_dict({})


def _dataset(args, split="test"):
    if args.images and args.labels:
        return load_idx(args.images, args.labels, args.n_classes)
    if args.data:
        d = Path(args.data)
        return load_idx(d / f"{split}-images.idx", d / f"{split}-labels.idx", args.n_classes)
    raise SystemExit("give --data DIR or --images/--labels")


def _add_data_args(p, split_default="test"):
    p.add_argument("--data", help="run directory holding <split>-images.idx / -labels.idx")
    p.add_argument("--split", default=split_default)
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--n-classes", type=int, default=None)


def _attack_cfg(args, cfg: Config, method=None) -> AttackConfig:
    a = cfg.attack
    if args.eps is not None:
        a.eps = parse_budget(args.eps)
    if args.step_size is not None:
        a.step_size = parse_budget(args.step_size)
    if args.steps is not None:
        a.n_steps = args.steps
    if getattr(args, "restarts", None) is not None:
        a.n_restarts = args.restarts
    return a.config(method or args.method or a.methods[0], cfg.seed if args.seed is None
                    else args.seed)


def _add_attack_args(p):
    p.add_argument("--method", choices=["fgsm", "pgd", "fab"])
    p.add_argument("--eps", help="L-inf budget, e.g. 8/255")
    p.add_argument("--step-size")
    p.add_argument("--steps", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--seed", type=int)


# -- subcommands -----------------------------------------------------------

def cmd_pipeline(args) -> int:
    from .harness import run_pipeline, validate_report
    cfg = _config(args)
    report = run_pipeline(cfg, args.out)
    validate_report(json.loads((Path(args.out) / "report.json").read_text()))
    _print({"report": str(Path(args.out) / "report.json"), "rows": len(report.rows)})
    return 0


def cmd_train(args) -> int:
    from .federation import write_round_log
    from .harness import _variant_name, prepare_data, save_splits, train_variant
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val, test = prepare_data(cfg)
    save_splits(out, (train, val, test))
    summary = {}
    for mode in ([args.mode] if args.mode else cfg.federation.variants):
        name = _variant_name(mode)
        res = train_variant(cfg, mode, train, eval_set=val)
        save_model(res.model, out / f"{name}.psrl", {"epsilon": res.epsilon, "mode": mode})
        write_round_log(res.logs, out / f"{name}-rounds.csv")
        summary[name] = {"epsilon": res.epsilon,
                         "clean_acc": accuracy(res.model, test.images, test.labels)}
    _print(summary)
    return 0


def cmd_attack(args) -> int:
    from .harness import _load_any
    cfg = _config(args)
    model = _load_any(args.model)
    data = _dataset(args, args.split)
    acfg = _attack_cfg(args, cfg)
    batch = run_attack(model, data.images, data.labels, acfg)
    x_eval = budgeted(batch, data.images, acfg.eps) if acfg.method == "fab" else batch.x_adv
    finite = batch.norms[np.isfinite(batch.norms)]
    if args.out:
        save_tensors(args.out, {"x_adv": batch.x_adv, "norms": batch.norms.astype(np.float32)},
                     {"type": "adversarial", "attack": acfg.method, "eps": acfg.eps,
                      "seed": acfg.seed, "labels": data.labels.tolist()})
    _print({"method": acfg.method, "eps": acfg.eps, "seed": acfg.seed,
            "clean_acc": accuracy(model, data.images, data.labels),
            "robust_acc": accuracy(model, x_eval, data.labels),
            "success_rate": float(batch.success.mean()) if len(batch) else 0.0,
            "mean_norm": float(finite.mean()) if finite.size else None,
            "max_norm": float(finite.max()) if finite.size else None})
    return 0


def cmd_quantize(args) -> int:
    from .harness import quantize_checkpoint
    from .nn.checkpoint import load_model, load_tensors
    model = load_model(args.model)
    _, meta = load_tensors(args.model)
    calib = _dataset(args, args.split)
    q, sizes = quantize_checkpoint(model, calib)
    q.save(args.out, {"epsilon": (meta or {}).get("epsilon", 0.0)})
    Path(args.out).with_suffix(".json").write_text(json.dumps(sizes, sort_keys=True))
    _print(sizes)
    return 0


def cmd_evaluate(args) -> int:
    from .harness import ThreatModel, _load_any, evaluate_robustness
    cfg = _config(args)
    model = _load_any(args.model)
    data = _dataset(args, args.split)
    if cfg.eval.n_samples is not None:
        data = data.subset(np.arange(min(cfg.eval.n_samples, len(data))))
    repeats = args.repeats or cfg.eval.repeats
    threat = ThreatModel("transfer", args.generator) if args.generator else ThreatModel()
    out = {}
    methods = [args.method] if args.method else cfg.attack.methods
    for m in methods:
        stats = evaluate_robustness(model, data, _attack_cfg(args, cfg, m), threat, repeats)
        out[m] = {"clean_acc": stats.clean_acc, "robust_acc_mean": stats.mean,
                  "robust_acc_std": stats.std, "robust_acc_values": stats.values,
                  "threat": threat.kind}
    _print(out)
    return 0


def cmd_accountant(args) -> int:
    q, delta, steps = args.q, args.delta, args.steps
    if (args.sigma is None) == (args.target_epsilon is None):
        raise SystemExit("give exactly one of --sigma or --target-epsilon")
    sigma = args.sigma
    out = {"q": q, "delta": delta, "steps": steps}
    if sigma is None:
        sigma = dp.calibrate_sigma(args.target_epsilon, delta, q, steps)
        out["target_epsilon"] = args.target_epsilon
    eps, alpha = dp.compute_epsilon(q, sigma, steps, delta)
    out.update(sigma=sigma, epsilon=eps, best_alpha=alpha)
    _print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psr-lab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pipeline", help="run the full experiment")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("train", help="data prep and federated training only")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=["standard", "dp", "adversarial", "dp+adversarial"])
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("attack", help="craft adversarial examples against a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    _add_data_args(s)
    _add_attack_args(s)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("quantize", help="static int8 quantization of a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    _add_data_args(s, "val")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("evaluate", help="repeated robustness evaluation")
    s.add_argument("--model", required=True)
    s.add_argument("--config")
    s.add_argument("--generator", help="transfer-attack generator checkpoint")
    s.add_argument("--repeats", type=int)
    _add_data_args(s)
    _add_attack_args(s)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("accountant", help="RDP epsilon / sigma calibration")
    s.add_argument("--q", type=float, required=True)
    s.add_argument("--sigma", type=float)
    s.add_argument("--target-epsilon", type=float)
    s.add_argument("--delta", type=float, default=1e-5)
    s.add_argument("--steps", type=int, required=True)
    s.set_defaults(func=cmd_accountant)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"psr-lab {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
