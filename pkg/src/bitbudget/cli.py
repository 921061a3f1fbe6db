"""Command-line entry points.

Exit codes: 0 success, 1 validation error (bad inputs, mismatched files),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .allocators import InfeasibleTarget
from .budget import avg_bits
from .calibration import ActivationScales, CalibrationError, collect_activation_scales
from .config import ConfigError, RunConfig
from .plans import (
    PlanError, attach_units, check_plan_matches, ensure_recons, apply_plan,
    load_plan, render_report,
)
from .proxy import ProxyModel, QualityOracle, TrainingError, encode, load_corpus
from .rlenv import ContractViolation
from .runner import (
    corpus_splits, prepare_workspace, run_heuristic, run_training, sweep,
    train_proxy_store,
)
from .store import StoreError, load_model, save_model

VALIDATION_ERRORS = (
    ConfigError, StoreError, PlanError, CalibrationError, InfeasibleTarget,
    ContractViolation, TrainingError, ValueError, FileNotFoundError,
)


def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict = {}
    for name in ("store_dir", "out_dir", "chunk_size", "salient_rate", "episodes", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "target", None) is not None:
        overrides.setdefault("heuristic", {})["target_bits"] = args.target
    if args.config:
        return RunConfig.load(args.config, overrides)
    cfg = RunConfig.from_dict(overrides)
    return cfg


def _workspace_for_plan(args, plan):
    cfg = _load_config(args)
    if not cfg.store_dir:
        raise ConfigError("--store-dir (or a config file) is required")
    echo = plan.config_echo or {}
    cfg.chunk_size = echo.get("chunk_size", cfg.chunk_size)
    cfg.salient_rate = echo.get("salient_rate", cfg.salient_rate)
    cfg.fallback_threshold = echo.get("fallback_threshold", cfg.fallback_threshold)
    cfg.fit_steps = echo.get("fit_steps", cfg.fit_steps)
    return cfg


def cmd_train_proxy(args) -> int:
    cfg = _load_config(args)
    diag = train_proxy_store(cfg, args.out_store)
    print(json.dumps({"store": args.out_store, **diag}))
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    store = load_model(cfg.store_dir)
    model = ProxyModel.from_store(store)
    tokens = encode(load_corpus())
    calib, _ = corpus_splits(tokens, cfg)
    usable = (calib.size - 1) // cfg.proxy.context * cfg.proxy.context
    scales = collect_activation_scales(model, calib[:usable].reshape(-1, cfg.proxy.context))
    scales.save(args.out)
    print(json.dumps({"scales": args.out, "tensors": len(scales.scales)}))
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    result = run_training(cfg, resume=args.resume)
    print(json.dumps({
        "plan": result.plan_path,
        "greedy_plan": result.greedy_plan_path,
        "checkpoint": result.checkpoint_path,
        "log": result.log_path,
        "best_reward": result.best_reward,
        "avg_bits": result.plan.avg_bits,
        "rho": result.metrics.get("rho"),
    }))
    return 0


def cmd_heuristic(args) -> int:
    cfg = _load_config(args)
    result = run_heuristic(cfg)
    print(json.dumps({
        "plan": result.plan_path,
        "avg_bits": result.plan.avg_bits,
        "rho": result.metrics["rho"],
    }))
    return 0


def cmd_apply(args) -> int:
    plan = load_plan(args.plan)
    cfg = _workspace_for_plan(args, plan)
    store = load_model(cfg.store_dir)
    check_plan_matches(plan, store)
    model = ProxyModel.from_store(store)
    attach_units(plan, store, cfg.chunk_size, model.quantizable_names())
    scales = ActivationScales.load(args.scales)
    ensure_recons(plan, scales, cfg.salient_rate, cfg.fallback_threshold, cfg.fit_steps)
    quantized = apply_plan(plan, store)
    save_model(quantized, args.out_store)
    per_tensor: dict[str, list] = {}
    for e in plan.entries:
        per_tensor.setdefault(e.decision.tensor_name, []).append(e.decision)
    report = {
        name: {"effective_bits": avg_bits(ds), "units": len(ds)}
        for name, ds in per_tensor.items()
    }
    print(json.dumps({"store": args.out_store, "avg_bits": plan.avg_bits,
                      "tensors": report}))
    return 0


def cmd_eval(args) -> int:
    plan = load_plan(args.plan)
    cfg = _workspace_for_plan(args, plan)
    store = load_model(cfg.store_dir)
    check_plan_matches(plan, store)
    model = ProxyModel.from_store(store)
    attach_units(plan, store, cfg.chunk_size, model.quantizable_names())
    scales = ActivationScales.load(args.scales)
    ensure_recons(plan, scales, cfg.salient_rate, cfg.fallback_threshold, cfg.fit_steps)
    tokens = encode(load_corpus())
    _, eval_tokens = corpus_splits(tokens, cfg)
    metrics = QualityOracle(model, eval_tokens).evaluate(plan)
    payload = metrics.as_dict()
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    print(json.dumps(payload))
    return 0


def cmd_report(args) -> int:
    plan = load_plan(args.plan)
    report = render_report(plan)
    if args.json:
        print(json.dumps(report, indent=2))
        return 0
    print(f"average bits: {report['avg_bits']:.4f}   skip fraction: {report['skip_frac']:.4f}")
    print("action histogram (units):")
    for label, count in report["counts"].items():
        print(f"  {label:>5}: {count:6d}  ({report['percent'][label]:6.2f}%)")
    print("grouped:")
    for label, pct in report["percent_grouped"].items():
        print(f"  {label:>10}: {pct:6.2f}%")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values: list = []
    for tok in args.values.split(","):
        tok = tok.strip()
        values.append(float(tok) if "." in tok else int(tok))
    rows = sweep(cfg, args.axis, values, args.out)
    print(json.dumps({"csv": args.out, "rows": rows}))
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--store-dir", dest="store_dir", help="model store directory")
    p.add_argument("--out-dir", dest="out_dir", help="output directory")
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--salient-rate", dest="salient_rate", type=float)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitbudget",
        description="Budgeted mixed-precision bit-width allocation with a learned policy.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-proxy", help="train the bundled proxy model into a store")
    _add_common(p)
    p.add_argument("--out-store", required=True)
    p.set_defaults(func=cmd_train_proxy)

    p = sub.add_parser("calibrate", help="compute activation scales to JSON")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="train the allocation policy and write plans")
    _add_common(p)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("heuristic", help="deterministic saliency baseline plan")
    _add_common(p)
    p.add_argument("--target", type=float, help="target average bits")
    p.set_defaults(func=cmd_heuristic)

    p = sub.add_parser("apply", help="write a dequantized store from a plan")
    _add_common(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--scales", required=True)
    p.add_argument("--out-store", required=True)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="evaluate a plan's proxy metrics")
    _add_common(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--scales", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="action histogram and average bits of a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="re-run the pipeline across one axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=("chunk_size", "salient_rate", "episodes"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
