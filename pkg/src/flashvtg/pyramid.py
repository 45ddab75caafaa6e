"""Temporal feature pyramid, saliency head, moment head, boundary decoding,
and the intra/inter-scale confidence scoring.

Level k has length ceil(L_v / 2^(k-1)); all pyramid-wide vectors are laid
out level-major, time-minor, and decode_boundaries emits spans in that
same order so scores and spans stay aligned by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def level_length(n_clips: int, k: int) -> int:
    out = n_clips
    for _ in range(k - 1):
        out = -(-out // 2)
    return out


def level_stride_seconds(k: int, clip_len: float) -> float:
    return (2 ** (k - 1)) * clip_len


def anchor_centers(length: int, k: int, clip_len: float) -> np.ndarray:
    return (np.arange(length) + 0.5) * level_stride_seconds(k, clip_len)


# --- parameters ---------------------------------------------------------------


def _conv_params(params, rng, name, width, c_in, c_out):
    scale = math.sqrt(2.0 / (width * c_in + c_out))
    params[f"{name}.w"] = Tensor(
        scale * rng.normal(size=(width, c_in, c_out)), requires_grad=True
    )
    params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)


def init_head_params(
    rng: np.random.Generator,
    d: int,
    k_levels: int,
    clip_len: float,
    asr_enabled: bool,
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for i in range(1, k_levels):
        _conv_params(params, rng, f"pyr.conv{i}", 3, d, d)
    _conv_params(params, rng, "moment.conv1", 3, d, d)
    _conv_params(params, rng, "moment.conv2", 3, d, 2)
    for k in range(1, k_levels + 1):
        init = math.log(level_stride_seconds(k, clip_len))
        params[f"moment.logc{k}"] = Tensor(np.array(init), requires_grad=True)
    params["hd.w1"] = Tensor(
        math.sqrt(1.0 / d) * rng.normal(size=(d, d)), requires_grad=True
    )
    params["hd.w2"] = Tensor(
        math.sqrt(1.0 / d) * rng.normal(size=(d, d)), requires_grad=True
    )
    if asr_enabled:
        for side in ("intra", "inter"):
            _conv_params(params, rng, f"asr.{side}.conv1", 5, d, d)
            _conv_params(params, rng, f"asr.{side}.conv2", 5, d, 1)
        params["asr.mix"] = Tensor(np.array(0.0), requires_grad=True)
    else:
        # isolated-position baseline: width-1 confidence head
        _conv_params(params, rng, "score.base", 1, d, 1)
    return params


# --- pyramid ---------------------------------------------------------------------


def pool_mask(mask: np.ndarray) -> np.ndarray:
    """Stride-2 OR-pooling: a coarse position is valid iff any preimage is."""
    n = len(mask)
    out = np.zeros(-(-n // 2), dtype=bool)
    out |= mask[0::2]
    if n > 1:
        out[: len(mask[1::2])] |= mask[1::2]
    return out


def build_pyramid(
    fused: Tensor, params, k_levels: int, mask: np.ndarray | None = None
) -> list[tuple[Tensor, np.ndarray | None]]:
    """Level 1 is the fused sequence itself; each next level is a stride-2
    same-padded conv of the previous one. Invalid positions are zeroed before
    convolving so they contribute nothing downstream."""
    if k_levels < 1:
        raise ValueError("pyramid needs at least one level")
    levels = [(fused, mask)]
    current, cur_mask = fused, mask
    for i in range(1, k_levels):
        if cur_mask is not None and not cur_mask.all():
            current = T.mul(current, Tensor(cur_mask.astype(np.float64)[:, None]))
        current = T.conv1d(
            current, params[f"pyr.conv{i}.w"], params[f"pyr.conv{i}.b"], stride=2
        )
        cur_mask = pool_mask(cur_mask) if cur_mask is not None else None
        levels.append((current, cur_mask))
    return levels


# --- heads ------------------------------------------------------------------------


def hd_head(fused: Tensor, params, mask: np.ndarray | None = None) -> Tensor:
    """Clip-level saliency: scaled per-clip dot product between a projected
    clip feature and the projected global (masked-mean) context."""
    n_clips, d = fused.data.shape
    m = np.ones(n_clips, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("hd_head: no valid clips")
    masked = T.mul(fused, Tensor(m.astype(np.float64)[:, None]))
    ctx = T.mul(T.tsum(masked, axis=0, keepdims=True), Tensor(1.0 / m.sum()))
    per_clip = T.matmul(fused, params["hd.w1"])
    ctx = T.matmul(ctx, params["hd.w2"])
    return T.mul(T.tsum(T.mul(per_clip, ctx), axis=1), Tensor(1.0 / math.sqrt(d)))


def saliency_for_ranking(scores: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Invalid clips get a -inf sentinel so they rank last."""
    out = np.asarray(scores, dtype=np.float64).copy()
    if mask is not None:
        out[~np.asarray(mask, dtype=bool)] = -np.inf
    return out


def moment_head(level: Tensor, params, c_scale) -> Tensor:
    """Nonnegative (left, right) offsets in seconds for every position."""
    h = T.relu(T.conv1d(level, params["moment.conv1.w"], params["moment.conv1.b"]))
    h = T.relu(T.conv1d(h, params["moment.conv2.w"], params["moment.conv2.b"]))
    scale = c_scale if isinstance(c_scale, Tensor) else Tensor(float(c_scale))
    return T.mul(h, scale)


def decode_boundaries(
    offsets: np.ndarray, k: int, clip_len: float, duration: float
) -> tuple[np.ndarray, np.ndarray, int]:
    """Offsets -> (spans (n, 2), kept position indices, dropped count).

    Span = anchor center minus/plus the predicted offsets, clamped to the
    video extent; zero-or-negative-length spans are dropped.
    """
    centers = anchor_centers(offsets.shape[0], k, clip_len)
    starts = np.clip(centers - offsets[:, 0], 0.0, duration)
    ends = np.clip(centers + offsets[:, 1], 0.0, duration)
    keep = ends > starts
    spans = np.stack([starts[keep], ends[keep]], axis=1)
    return spans, np.flatnonzero(keep), int((~keep).sum())


# --- confidence scoring ----------------------------------------------------------


@dataclass
class ScoreOutput:
    c_final: Tensor  # (sum L_k,) in [0, 1]
    pre_mix: Tensor  # pre-sigmoid combined scores
    intra_pre: Tensor | None
    inter_pre: Tensor | None
    mix: float  # x in (0, 1); 1.0 means intra-only (baseline head)


def _score_head(x: Tensor, params, name) -> Tensor:
    h = T.relu(T.conv1d(x, params[f"{name}.conv1.w"], params[f"{name}.conv1.b"]))
    out = T.conv1d(h, params[f"{name}.conv2.w"], params[f"{name}.conv2.b"])
    return T.reshape(out, (-1,))


def asr_scores(levels, params, mix_override: float | None = None) -> ScoreOutput:
    """Blend per-level (intra) and cross-level (inter) confidence scores.

    The intra head slides over time within each level separately; the inter
    head slides over the level-concatenated sequence, so its receptive field
    crosses scale boundaries. ``mix_override`` pins the blend weight for
    endpoint tests.
    """
    if not levels:
        raise ValueError("empty pyramid")
    intra = T.concat([_score_head(feat, params, "asr.intra") for feat, _ in levels])
    stacked = T.concat([feat for feat, _ in levels], axis=0)
    inter = _score_head(stacked, params, "asr.inter")
    if mix_override is None:
        x = T.sigmoid(T.reshape(params["asr.mix"], (1,)))
    else:
        x = Tensor(np.array([float(mix_override)]))
    one = Tensor(np.array([1.0]))
    pre = T.add(T.mul(x, intra), T.mul(T.sub(one, x), inter))
    return ScoreOutput(
        c_final=T.sigmoid(pre),
        pre_mix=pre,
        intra_pre=intra,
        inter_pre=inter,
        mix=float(x.data[0]),
    )


def baseline_scores(levels, params) -> ScoreOutput:
    """Width-1 per-position head: confidence from one position in isolation."""
    pre = T.concat([_score_head_w1(feat, params) for feat, _ in levels])
    return ScoreOutput(
        c_final=T.sigmoid(pre), pre_mix=pre, intra_pre=None, inter_pre=None, mix=1.0
    )


def _score_head_w1(x: Tensor, params) -> Tensor:
    out = T.conv1d(x, params["score.base.w"], params["score.base.b"])
    return T.reshape(out, (-1,))


def pyramid_mask(levels) -> np.ndarray:
    parts = []
    for feat, mask in levels:
        n = feat.data.shape[0]
        parts.append(np.ones(n, dtype=bool) if mask is None else mask)
    return np.concatenate(parts)
