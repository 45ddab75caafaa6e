"""Command-line interface: synth-gen, train, eval, predict, ablate, gradcheck.

Config files are flat ``key = value`` text; unknown keys are errors and
command-line flags win over file values. Machine-readable output goes to
stdout or files, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataio import DataError, load_checkpoint, restore_params
from .metrics import evaluate_predictions, load_predictions, save_predictions
from .model import ModelConfig, init_model_params
from .optim import OptimState
from .synth import SyntheticConfig, generate_synthetic, load_dataset, write_dataset
from .trainer import (
    GATE_TOLERANCE,
    TrainConfig,
    ablate,
    apply_preset,
    evaluate,
    gradient_gate,
    predict_dataset,
    train,
)

log = logging.getLogger("flashvtg")

_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_SYNTH_KEYS = {
    "n_videos": int,
    "min_clips": int,
    "max_clips": int,
    "clip_len": float,
    "video_dim": int,
    "query_dim": int,
    "short_frac": float,
    "middle_frac": float,
    "signal_strength": float,
    "noise_std": float,
    "query_jitter": float,
    "synth_seed": int,
}
_EXTRA_KEYS = {"preset": str}
_ALL_KEYS = {**_TRAIN_KEYS, **_SYNTH_KEYS, **_EXTRA_KEYS}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    typ = _ALL_KEYS[key]
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def parse_config_file(path: str | Path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def build_train_config(file_values: dict, overrides: dict) -> TrainConfig:
    merged = {k: v for k, v in file_values.items() if k in _TRAIN_KEYS}
    preset = overrides.pop("preset", None) or file_values.get("preset", "")
    cfg = TrainConfig()
    if preset:
        cfg = apply_preset(cfg, preset)
        cfg_dict = cfg.to_dict()
        cfg_dict.update(merged)
        merged = cfg_dict
    cfg = TrainConfig(**merged) if merged else cfg
    for key, value in overrides.items():
        if value is not None:
            cfg = dataclasses.replace(cfg, **{key: value})
    return cfg


def build_synth_config(file_values: dict, overrides: dict) -> SyntheticConfig:
    cfg = SyntheticConfig()
    fields = {}
    short = file_values.get("short_frac")
    middle = file_values.get("middle_frac")
    for key, value in file_values.items():
        if key in ("short_frac", "middle_frac") or key not in _SYNTH_KEYS:
            continue
        fields["seed" if key == "synth_seed" else key] = value
    for key, value in overrides.items():
        if value is not None:
            if key == "short_frac":
                short = value
            else:
                fields[key] = value
    if short is not None:
        middle = middle if middle is not None else cfg.length_mix[1]
        middle = min(middle, 1.0 - short)
        fields["length_mix"] = (short, middle, max(0.0, 1.0 - short - middle))
    return dataclasses.replace(cfg, **fields).validate()


# --- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    cfg = build_synth_config(
        file_values,
        {
            "n_videos": args.n_videos,
            "signal_strength": args.signal_strength,
            "noise_std": args.noise_std,
            "short_frac": args.short_frac,
            "seed": args.seed,
        },
    )
    dataset = generate_synthetic(cfg)
    manifest = write_dataset(args.out, dataset, cfg)
    log.info("wrote %d videos to %s", len(dataset), args.out)
    print(json.dumps(manifest, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    cfg = build_train_config(
        file_values,
        {
            "preset": args.preset,
            "seed": args.seed,
            "epochs": args.epochs,
            "max_steps": args.max_steps,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "eval_every": args.eval_every,
        },
    )
    train_ds = load_dataset(args.data)
    val_ds = load_dataset(args.val_data) if args.val_data else None
    init_params = init_optim = None
    if args.resume:
        loaded, ckpt_cfg, optim = load_checkpoint(args.resume)
        first = train_ds[0]
        mcfg = cfg.model_config(first.features.dim, first.query.dim, first.features.clip_len)
        if ckpt_cfg.get("model") != mcfg.to_dict():
            raise DataError("checkpoint model config does not match current config")
        init_params = init_model_params(mcfg, seed=cfg.seed)
        restore_params(init_params, loaded)
        if optim is not None:
            init_optim = OptimState(
                step=optim["step"],
                m={k: v.astype(np.float64) for k, v in optim["m"].items()},
                v={k: v.astype(np.float64) for k, v in optim["v"].items()},
            )
    result = train(
        cfg,
        train_ds,
        val_ds=val_ds,
        out_dir=args.out,
        init_params=init_params,
        init_optim=init_optim,
    )
    log.info(
        "finished: %d steps, aborted=%s, best val mAP=%s",
        result.steps,
        result.aborted,
        result.best_map,
    )
    return 1 if result.aborted else 0


def _load_model(checkpoint_path):
    loaded, ckpt_cfg, _ = load_checkpoint(checkpoint_path)
    mcfg = ModelConfig.from_dict(ckpt_cfg["model"])
    params = init_model_params(mcfg, seed=int(ckpt_cfg["train"]["seed"]))
    restore_params(params, loaded)
    return params, mcfg, ckpt_cfg


def _human_table(report_dict: dict) -> str:
    lines = []
    for key, value in report_dict.items():
        if isinstance(value, float):
            lines.append(f"  {key:<12} {100.0 * value:7.2f}")
        elif value is None:
            lines.append(f"  {key:<12}    -")
        else:
            lines.append(f"  {key:<12} {value}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    gts = {s.annotation.qid: s.annotation for s in dataset}
    if args.pred_file:
        preds = load_predictions(args.pred_file)
        report = evaluate_predictions(preds, gts)
    else:
        params, mcfg, _ = _load_model(args.checkpoint)
        report = evaluate(params, mcfg, dataset, args.top_n, args.nms_threshold)
    payload = report.to_dict()
    print(json.dumps(payload, sort_keys=True))
    log.info("metric report:\n%s", _human_table(payload))
    if args.out:
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def cmd_predict(args) -> int:
    params, mcfg, _ = _load_model(args.checkpoint)
    dataset = load_dataset(args.data)
    preds = predict_dataset(params, mcfg, dataset, args.top_n, args.nms_threshold)
    save_predictions(args.out, preds)
    log.info("wrote %d prediction sets to %s", len(preds), args.out)
    return 0


def cmd_ablate(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    cfg = build_train_config(
        file_values,
        {
            "preset": args.preset,
            "seed": args.seed,
            "epochs": args.epochs,
            "max_steps": args.max_steps,
        },
    )
    train_ds = load_dataset(args.data)
    val_ds = load_dataset(args.val_data) if args.val_data else train_ds
    rows = ablate(cfg, train_ds, val_ds, out_csv=args.out)
    print(json.dumps(rows, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    err, name = gradient_gate(n_seeds=args.seeds, coords_per_param=args.coords)
    payload = {
        "max_relative_error": err,
        "worst_parameter": name,
        "tolerance": GATE_TOLERANCE,
        "passed": bool(err < GATE_TOLERANCE),
    }
    print(json.dumps(payload, sort_keys=True))
    if not payload["passed"]:
        log.error("gradient check FAILED: %.3e at %s", err, name)
        return 1
    log.info("gradient check passed: %.3e (worst: %s)", err, name)
    return 0


# --- argument wiring -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flashvtg",
        description="Desk-scale video temporal grounding: synthesize data, "
        "train, evaluate, predict, ablate, verify gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-videos", type=int, dest="n_videos")
    p.add_argument("--signal-strength", type=float, dest="signal_strength")
    p.add_argument("--noise-std", type=float, dest="noise_std")
    p.add_argument("--short-frac", type=float, dest="short_frac")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", dest="val_data")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or prediction file")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--pred-file", dest="pred_file")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--top-n", type=int, dest="top_n", default=10)
    p.add_argument("--nms-threshold", type=float, dest="nms_threshold", default=0.7)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write ranked moment predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-n", type=int, dest="top_n", default=10)
    p.add_argument("--nms-threshold", type=float, dest="nms_threshold", default=0.7)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="baseline / +TFL / +TFL+ASR comparison")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", dest="val_data")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the objective")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--coords", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _setup_logging() -> None:
    # rebind to the *current* sys.stderr on every invocation
    root = logging.getLogger("flashvtg")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    root.propagate = False


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, ValueError, OSError, FloatingPointError) as err:
        log.error("%s", err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
