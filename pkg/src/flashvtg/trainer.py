"""Deterministic desk-scale training loop, evaluation, and the ablation harness."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataio import Annotation, save_checkpoint
from .losses import LossWeights, sample_loss
from .metrics import MetricReport, evaluate_predictions
from .model import ModelConfig, forward, init_model_params, predict_sample
from .optim import AdamWConfig, OptimState, adamw_step, grad_check, zero_grads
from .synth import Dataset
from .tensor import Tensor

log = logging.getLogger("flashvtg")

GATE_TOLERANCE = 1e-3


@dataclass
class TrainConfig:
    d: int = 256
    heads: int = 8
    k_levels: int = 4
    n_dummies: int = 10
    encoder_layers: int = 3
    aca_residual: bool = True
    tfl_enabled: bool = True
    asr_enabled: bool = True
    lambda_reg: float = 1.0
    lambda_cls: float = 1.0
    lambda_cas: float = 1.0
    lambda_snce: float = 0.3
    lambda_sal: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    max_steps: int = 0  # 0 = no cap
    seed: int = 0
    eval_every: int = 0  # epochs between val evaluations; 0 = only at the end
    top_n: int = 10
    nms_threshold: float = 0.7

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            reg=self.lambda_reg,
            cls=self.lambda_cls,
            cas=self.lambda_cas,
            snce=self.lambda_snce,
            sal=self.lambda_sal,
        )

    def model_config(self, video_dim: int, query_dim: int, clip_len: float) -> ModelConfig:
        return ModelConfig(
            video_dim=video_dim,
            query_dim=query_dim,
            d=self.d,
            heads=self.heads,
            k_levels=self.k_levels,
            n_dummies=self.n_dummies,
            encoder_layers=self.encoder_layers,
            clip_len=clip_len,
            aca_residual=self.aca_residual,
            tfl_enabled=self.tfl_enabled,
            asr_enabled=self.asr_enabled,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in self.__dataclass_fields__.values()}


TINY_PRESET = dict(d=64, heads=8, k_levels=3, n_dummies=4, encoder_layers=1)


def apply_preset(cfg: TrainConfig, preset: str) -> TrainConfig:
    if preset == "tiny":
        return replace(cfg, **TINY_PRESET)
    if preset in ("", "full", "default"):
        return cfg
    raise ValueError(f"unknown preset {preset!r}")


def worker_threads(kind: str) -> int:
    """FLASHVTG_THREADS caps workers; default is all cores for eval, 1 for train."""
    env = os.environ.get("FLASHVTG_THREADS")
    if env is not None:
        return max(1, int(env))
    return 1 if kind == "train" else (os.cpu_count() or 1)


# --- the gradient gate ------------------------------------------------------


def gradient_gate(
    n_seeds: int = 1, coords_per_param: int = 2
) -> tuple[float, str]:
    """Finite-difference check of the full objective on a tiny model.

    A failure here means a broken backward pass; training refuses to start.
    """
    worst, worst_name = 0.0, ""
    for s in range(n_seeds):
        cfg = ModelConfig(
            video_dim=5,
            query_dim=4,
            d=8,
            heads=2,
            k_levels=3,
            n_dummies=2,
            encoder_layers=1,
            clip_len=2.0,
        )
        params = init_model_params(cfg, seed=s)
        rng = np.random.default_rng(1000 + s)
        video = rng.normal(size=(12, 5))
        query = rng.normal(size=(3, 4))
        sal = np.zeros(12)
        sal[2:5] = [0.8, 1.0, 0.6]
        ann = Annotation(
            qid=f"gate{s}",
            vid=f"gate{s}",
            query_text="",
            duration=24.0,
            clip_len=2.0,
            relevant_windows=[[4.0, 10.0]],
            relevant_clip_ids=[2, 3, 4],
            saliency=sal.tolist(),
        )
        weights = LossWeights()

        def loss():
            out = forward(params, cfg, video, query)
            total, _ = sample_loss(out, ann, weights, seed=s, clip_len=cfg.clip_len)
            return total

        err, name = grad_check(
            loss, params, max_coords_per_param=coords_per_param,
            rng=np.random.default_rng(s),
        )
        if err > worst:
            worst, worst_name = err, f"seed{s}:{name}"
    return worst, worst_name


_GATE_RESULT: tuple[float, str] | None = None


def ensure_gate() -> tuple[float, str]:
    global _GATE_RESULT
    if _GATE_RESULT is None:
        _GATE_RESULT = gradient_gate()
    err, name = _GATE_RESULT
    if err >= GATE_TOLERANCE:
        raise FloatingPointError(
            f"gradient gate failed: max relative error {err:.3e} at {name}"
        )
    return _GATE_RESULT


# --- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    optim_state: OptimState
    model_config: ModelConfig
    runlog: list[dict] = field(default_factory=list)
    best_map: float | None = None
    aborted: bool = False
    steps: int = 0


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = snap[k].copy()


def _assert_finite_params(params: dict[str, Tensor]) -> None:
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError(f"parameter {name!r} became non-finite")


def train(
    cfg: TrainConfig,
    train_ds: Dataset,
    val_ds: Dataset | None = None,
    out_dir: str | Path | None = None,
    run_gate: bool = True,
    init_params: dict[str, Tensor] | None = None,
    init_optim: OptimState | None = None,
) -> TrainResult:
    """Mini-batch AdamW descent; bit-reproducible under a fixed seed.

    Keeps the best checkpoint by validation average mAP when a validation
    set is evaluated, otherwise the final parameters. A non-finite loss or
    parameter aborts training and restores the last good epoch.
    """
    if len(train_ds) == 0:
        raise ValueError("training dataset is empty")
    if run_gate:
        ensure_gate()
    first = train_ds[0]
    mcfg = cfg.model_config(
        first.features.dim, first.query.dim, first.features.clip_len
    )
    params = init_params if init_params is not None else init_model_params(mcfg, seed=cfg.seed)
    state = init_optim if init_optim is not None else OptimState()
    adam = AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)
    weights = cfg.loss_weights()
    order_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))

    runlog: list[dict] = []
    best_map: float | None = None
    best_snap: dict[str, np.ndarray] | None = None
    last_good = _snapshot(params)
    aborted = False
    step = 0
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(train_ds))
        sums: dict[str, float] = {}
        n_batches = 0
        stop = False
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            try:
                zero_grads(params)
                total = None
                for idx in batch:
                    smp = train_ds[int(idx)]
                    out = forward(params, mcfg, smp.features.data, smp.query.data)
                    loss, comps = sample_loss(
                        out, smp.annotation, weights, cfg.seed, mcfg.clip_len
                    )
                    total = loss if total is None else T.add(total, loss)
                    for k, v in comps.items():
                        sums[k] = sums.get(k, 0.0) + v
                T.mul(total, Tensor(1.0 / len(batch))).backward()
                adamw_step(params, state, adam)
                _assert_finite_params(params)
            except FloatingPointError as err:
                log.error("training diverged at step %d: %s", step, err)
                _restore(params, last_good)
                aborted = True
                stop = True
                break
            step += 1
            n_batches += 1
            if cfg.max_steps and step >= cfg.max_steps:
                stop = True
                break

        denom = max(n_batches * cfg.batch_size, 1)
        row = {
            "epoch": epoch,
            "step": step,
            "wall_s": round(time.perf_counter() - t0, 4),
            "aborted": aborted,
        }
        for k, v in sums.items():
            row[f"loss_{k}"] = v / denom
        if (
            not aborted
            and val_ds is not None
            and cfg.eval_every > 0
            and (epoch + 1) % cfg.eval_every == 0
        ):
            report = evaluate(params, mcfg, val_ds, cfg.top_n, cfg.nms_threshold)
            row["val_map_avg"] = report.map_avg
            if best_map is None or report.map_avg > best_map:
                best_map = report.map_avg
                best_snap = _snapshot(params)
        runlog.append(row)
        if not aborted:
            last_good = _snapshot(params)
        if stop:
            break

    if best_snap is not None:
        _restore(params, best_snap)
    result = TrainResult(
        params=params,
        optim_state=state,
        model_config=mcfg,
        runlog=runlog,
        best_map=best_map,
        aborted=aborted,
        steps=step,
    )
    if out_path is not None:
        with open(out_path / "runlog.jsonl", "w", encoding="utf-8") as fh:
            for row in runlog:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        save_checkpoint(
            out_path / "model.ckpt",
            params,
            checkpoint_config(cfg, mcfg),
            optim_state={"step": state.step, "m": state.m, "v": state.v},
        )
    return result


def checkpoint_config(cfg: TrainConfig, mcfg: ModelConfig) -> dict:
    return {"train": cfg.to_dict(), "model": mcfg.to_dict()}


# --- evaluation -------------------------------------------------------------------


def evaluate(
    params: dict[str, Tensor],
    mcfg: ModelConfig,
    dataset: Dataset,
    top_n: int = 10,
    nms_thr: float = 0.7,
) -> MetricReport:
    preds = predict_dataset(params, mcfg, dataset, top_n, nms_thr)
    gts = {s.annotation.qid: s.annotation for s in dataset}
    return evaluate_predictions(preds, gts)


def predict_dataset(params, mcfg, dataset, top_n=10, nms_thr=0.7):
    n_workers = worker_threads("eval")
    if n_workers <= 1 or len(dataset) < 4:
        return [predict_sample(params, mcfg, s, top_n, nms_thr) for s in dataset]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(
            pool.map(lambda s: predict_sample(params, mcfg, s, top_n, nms_thr), dataset)
        )


# --- ablations ------------------------------------------------------------------


ABLATION_VARIANTS = (
    ("baseline", False, False),
    ("tfl", True, False),
    ("tfl_asr", True, True),
)


def ablate(
    cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset, out_csv: str | Path | None = None
) -> list[dict]:
    """Three runs differing only in the module flags, shared seed."""
    rows = []
    for name, tfl, asr in ABLATION_VARIANTS:
        variant = replace(cfg, tfl_enabled=tfl, asr_enabled=asr)
        result = train(variant, train_ds)
        report = evaluate(
            result.params, result.model_config, val_ds, cfg.top_n, cfg.nms_threshold
        )
        row = {"variant": name, "tfl": tfl, "asr": asr, "seed": cfg.seed}
        row.update(report.to_dict())
        row.pop("bucket_counts", None)
        rows.append(row)
        log.info(
            "ablation %-8s mAP=%.4f short=%s R1@0.7=%.4f",
            name,
            report.map_avg,
            f"{report.short_map:.4f}" if report.short_map is not None else "-",
            report.r1_at_07,
        )
    if out_csv is not None:
        write_ablation_csv(out_csv, rows)
    return rows


def write_ablation_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
