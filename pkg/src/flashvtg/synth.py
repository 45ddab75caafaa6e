"""Synthetic grounding datasets with planted, recoverable ground truth.

Each video carries a hidden per-query signal direction; clips inside the
ground-truth windows mix that direction into their noise at a controllable
strength, and the query tokens embed the same direction. High signal
strength makes the dataset solvable by a nearest-centroid oracle, which is
what makes end-to-end training runs verifiable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (
    Annotation,
    FeatureSequence,
    QueryTokens,
    load_annotations,
    load_features,
    save_annotations,
    save_features,
    validate_annotation,
)


@dataclass
class SyntheticConfig:
    n_videos: int = 100
    min_clips: int = 40
    max_clips: int = 80
    clip_len: float = 2.0
    video_dim: int = 32
    query_dim: int = 24
    # moment-length mixture over (<10 s, 10-30 s, >30 s) buckets
    length_mix: tuple[float, float, float] = (0.5, 0.3, 0.2)
    signal_strength: float = 3.0
    noise_std: float = 1.0
    query_jitter: float = 0.1
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        if self.n_videos < 1:
            raise ValueError("n_videos must be >= 1")
        if not (1 <= self.min_clips <= self.max_clips):
            raise ValueError("need 1 <= min_clips <= max_clips")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be >= 0")
        if self.clip_len <= 0:
            raise ValueError("clip_len must be positive")
        if abs(sum(self.length_mix) - 1.0) > 1e-9:
            raise ValueError("length_mix must sum to 1")
        return self


@dataclass
class Sample:
    features: FeatureSequence
    query: QueryTokens
    annotation: Annotation


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]


def _sample_window_clips(rng, n_clips, clip_len, mix):
    """Number of clips for one GT window, drawn from the length mixture."""
    dur = n_clips * clip_len
    bucket = rng.choice(3, p=mix)
    if bucket == 0 or dur <= 10.0:
        lo, hi = clip_len, min(10.0 - 1e-9, dur)
    elif bucket == 1 or dur <= 30.0:
        lo, hi = 10.0, min(30.0, dur)
    else:
        lo, hi = 30.0, dur
    length = rng.uniform(lo, max(lo, hi))
    return int(np.clip(round(length / clip_len), 1, n_clips))


def _plant_windows(rng, n_clips, clip_len, mix):
    """1-2 non-overlapping clip-aligned windows; resample until they fit.

    Windows are capped below the full video so at least one negative clip
    always exists for contrastive sampling."""
    n_windows = 1 if rng.random() < 0.7 else 2
    cap = max(1, int(0.85 * n_clips))
    taken: list[tuple[int, int]] = []
    for _ in range(n_windows):
        for _attempt in range(50):
            w = min(_sample_window_clips(rng, n_clips, clip_len, mix), cap)
            start = int(rng.integers(0, n_clips - w + 1))
            cand = (start, start + w)
            if all(cand[1] <= s or cand[0] >= e for s, e in taken):
                taken.append(cand)
                break
    taken.sort()
    return taken


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    # one fixed cross-modal projection per dataset; videos only vary in u
    proj_rng = np.random.default_rng(root.spawn(1)[0])
    projection = proj_rng.normal(size=(cfg.query_dim, cfg.video_dim))
    projection /= np.linalg.norm(projection, axis=1, keepdims=True)

    samples = []
    for vi in range(cfg.n_videos):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, vi)))
        n_clips = int(rng.integers(cfg.min_clips, cfg.max_clips + 1))
        duration = n_clips * cfg.clip_len
        windows = _plant_windows(rng, n_clips, cfg.clip_len, cfg.length_mix)

        u = rng.normal(size=cfg.query_dim)
        u /= np.linalg.norm(u)
        u_proj = u @ projection
        u_proj /= np.linalg.norm(u_proj)

        feats = cfg.noise_std * rng.normal(size=(n_clips, cfg.video_dim))
        saliency = np.zeros(n_clips)
        relevant: list[int] = []
        for cs, ce in windows:
            amps = rng.uniform(0.5, 1.0, size=ce - cs)
            feats[cs:ce] += cfg.signal_strength * amps[:, None] * u_proj
            saliency[cs:ce] = amps
            relevant.extend(range(cs, ce))

        n_words = int(rng.integers(3, 9))
        tokens = u[None, :] + cfg.query_jitter * rng.normal(
            size=(n_words, cfg.query_dim)
        )

        ann = validate_annotation(
            Annotation(
                qid=f"q{vi:05d}",
                vid=f"v{vi:05d}",
                query_text=f"planted signal query {vi}",
                duration=float(duration),
                clip_len=cfg.clip_len,
                relevant_windows=[
                    [cs * cfg.clip_len, ce * cfg.clip_len] for cs, ce in windows
                ],
                relevant_clip_ids=relevant,
                saliency=saliency.tolist(),
            )
        )
        samples.append(
            Sample(
                features=FeatureSequence(data=feats, clip_len=cfg.clip_len),
                query=QueryTokens(data=tokens),
                annotation=ann,
            )
        )
    return Dataset(samples)


# --- on-disk layout -------------------------------------------------------


def write_dataset(out_dir: str | Path, dataset: Dataset, cfg: SyntheticConfig) -> dict:
    """Write features/, queries/, annotations.jsonl and a seed manifest."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    anns = []
    for sample in dataset:
        ann = sample.annotation
        save_features(out / "features" / f"{ann.vid}.fvtg", sample.features.data)
        save_features(out / "queries" / f"{ann.qid}.fvtg", sample.query.data)
        anns.append(ann)
    save_annotations(out / "annotations.jsonl", anns)

    digest = hashlib.sha256()
    for ann in anns:
        digest.update(Path(out / "features" / f"{ann.vid}.fvtg").read_bytes())
        digest.update(Path(out / "queries" / f"{ann.qid}.fvtg").read_bytes())
    digest.update(Path(out / "annotations.jsonl").read_bytes())
    manifest = {
        "seed": cfg.seed,
        "n_videos": cfg.n_videos,
        "clip_len": cfg.clip_len,
        "video_dim": cfg.video_dim,
        "query_dim": cfg.query_dim,
        "signal_strength": cfg.signal_strength,
        "noise_std": cfg.noise_std,
        "content_sha256": digest.hexdigest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(data_dir: str | Path) -> Dataset:
    root = Path(data_dir)
    anns = load_annotations(root / "annotations.jsonl")
    samples = []
    for ann in anns:
        feats = load_features(root / "features" / f"{ann.vid}.fvtg", ann.clip_len)
        if feats.n_clips != ann.n_clips:
            raise ValueError(
                f"{ann.vid}: feature rows {feats.n_clips} != clip count {ann.n_clips}"
            )
        query_arr = load_features(root / "queries" / f"{ann.qid}.fvtg")
        samples.append(
            Sample(
                features=feats,
                query=QueryTokens(data=query_arr.astype(np.float64)),
                annotation=ann,
            )
        )
    return Dataset(samples)
