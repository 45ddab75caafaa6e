"""Full grounding model: fusion -> encoder -> pyramid -> heads -> decode."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fusion, pyramid
from . import tensor as T
from .dataio import FeatureSequence, QueryTokens
from .metrics import PredictionSet, nms
from .synth import Sample
from .tensor import Tensor


@dataclass
class ModelConfig:
    video_dim: int
    query_dim: int
    d: int = 256
    heads: int = 8
    k_levels: int = 4
    n_dummies: int = 10
    encoder_layers: int = 3
    clip_len: float = 2.0
    aca_residual: bool = True
    tfl_enabled: bool = True
    asr_enabled: bool = True

    def __post_init__(self):
        if not self.tfl_enabled:
            self.k_levels = 1
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")

    def to_dict(self) -> dict:
        return {
            "video_dim": self.video_dim,
            "query_dim": self.query_dim,
            "d": self.d,
            "heads": self.heads,
            "k_levels": self.k_levels,
            "n_dummies": self.n_dummies,
            "encoder_layers": self.encoder_layers,
            "clip_len": self.clip_len,
            "aca_residual": self.aca_residual,
            "tfl_enabled": self.tfl_enabled,
            "asr_enabled": self.asr_enabled,
        }

    @staticmethod
    def from_dict(obj: dict) -> "ModelConfig":
        return ModelConfig(**obj)


def init_model_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    params = fusion.init_fusion_params(
        rng, cfg.video_dim, cfg.query_dim, cfg.d, cfg.n_dummies, cfg.encoder_layers
    )
    params.update(
        pyramid.init_head_params(rng, cfg.d, cfg.k_levels, cfg.clip_len, cfg.asr_enabled)
    )
    return params


@dataclass
class ForwardOutput:
    fused: Tensor  # (L_v, d) encoder output
    attention_mass: np.ndarray  # (L_v,) weight on real words per clip
    saliency: Tensor  # (L_v,)
    levels: list  # [(Tensor (L_k, d), mask)]
    offsets: list[Tensor]  # per level (L_k, 2) nonnegative seconds
    scores: pyramid.ScoreOutput
    pyramid_mask: np.ndarray = field(default=None)

    @property
    def level_lengths(self) -> list[int]:
        return [feat.data.shape[0] for feat, _ in self.levels]


def forward(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    video: np.ndarray,
    query: np.ndarray,
    video_mask: np.ndarray | None = None,
    query_mask: np.ndarray | None = None,
    mask_dummies: bool = False,
    mix_override: float | None = None,
) -> ForwardOutput:
    v_proj, q_proj = fusion.project_inputs(Tensor(video), Tensor(query), params)
    fused, mass = fusion.adaptive_cross_attention(
        v_proj,
        q_proj,
        params,
        cfg.heads,
        query_mask=query_mask,
        residual=cfg.aca_residual,
        mask_dummies=mask_dummies,
    )
    fused = fusion.encode(
        fused, params, cfg.heads, cfg.encoder_layers, mask=video_mask
    )
    saliency = pyramid.hd_head(fused, params, mask=video_mask)
    levels = pyramid.build_pyramid(fused, params, cfg.k_levels, mask=video_mask)
    offsets = [
        pyramid.moment_head(feat, params, T.exp(params[f"moment.logc{k}"]))
        for k, (feat, _) in enumerate(levels, start=1)
    ]
    if cfg.asr_enabled:
        scores = pyramid.asr_scores(levels, params, mix_override=mix_override)
    else:
        scores = pyramid.baseline_scores(levels, params)
    return ForwardOutput(
        fused=fused,
        attention_mass=mass,
        saliency=saliency,
        levels=levels,
        offsets=offsets,
        scores=scores,
        pyramid_mask=pyramid.pyramid_mask(levels),
    )


def decode_predictions(
    out: ForwardOutput, cfg: ModelConfig, clip_len: float, duration: float
) -> list[tuple[float, float, float]]:
    """All-level spans with their confidence, unsorted and pre-NMS."""
    conf = out.scores.c_final.data
    moments = []
    offset = 0
    for k, b in enumerate(out.offsets, start=1):
        spans, kept_idx, _ = pyramid.decode_boundaries(
            b.data, k, clip_len, duration
        )
        valid = out.pyramid_mask[offset : offset + b.data.shape[0]]
        for (s, e), i in zip(spans, kept_idx):
            if valid[i]:
                moments.append((float(s), float(e), float(conf[offset + i])))
        offset += b.data.shape[0]
    return moments


def predict(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    features: FeatureSequence,
    query: QueryTokens,
    duration: float,
    qid: str = "",
    top_n: int = 10,
    nms_thr: float = 0.7,
) -> PredictionSet:
    """Forward pass, decode every pyramid position, rank, suppress, truncate."""
    with T.no_grad():
        out = forward(
            params,
            cfg,
            features.data,
            query.data,
            video_mask=features.mask,
            query_mask=query.mask,
        )
    moments = decode_predictions(out, cfg, features.clip_len, duration)
    kept = nms(moments, iou_thr=nms_thr)[:top_n]
    sal = pyramid.saliency_for_ranking(out.saliency.data, features.mask)
    return PredictionSet(qid=qid, moments=kept, saliency=sal)


def predict_sample(params, cfg, sample: Sample, top_n: int = 10, nms_thr: float = 0.7):
    ann = sample.annotation
    return predict(
        params,
        cfg,
        sample.features,
        sample.query,
        duration=ann.duration,
        qid=ann.qid,
        top_n=top_n,
        nms_thr=nms_thr,
    )


def tiny_config(video_dim: int, query_dim: int, **overrides) -> ModelConfig:
    """Small preset for fast experiments and the gradient gate."""
    base = dict(
        video_dim=video_dim,
        query_dim=query_dim,
        d=64,
        heads=8,
        k_levels=3,
        n_dummies=4,
        encoder_layers=1,
        clip_len=2.0,
    )
    base.update(overrides)
    return ModelConfig(**base)
