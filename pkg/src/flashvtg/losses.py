"""Training objectives: anchor classification (focal), boundary regression
(L1), clip-aware confidence alignment (min-max MSE), contrastive saliency
(InfoNCE over sampled clips), and pairwise saliency ranking (hinge)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataio import Annotation
from .pyramid import anchor_centers
from .tensor import Tensor

log = logging.getLogger("flashvtg")

LENGTH_RANGE_FACTOR = 4.0  # level k < K admits windows shorter than 2^k * clip_len * this


@dataclass
class LossWeights:
    reg: float = 1.0
    cls: float = 1.0
    cas: float = 1.0
    snce: float = 0.3
    sal: float = 1.0

    def __post_init__(self):
        for name in ("reg", "cls", "cas", "snce", "sal"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")

    def to_dict(self) -> dict:
        return {"reg": self.reg, "cls": self.cls, "cas": self.cas, "snce": self.snce, "sal": self.sal}


@dataclass
class MatchTargets:
    """Per pyramid position (level-major): binary label and edge distances."""

    cls_labels: np.ndarray  # (n_positions,) {0, 1}
    reg_targets: np.ndarray  # (n_positions, 2) seconds; finite at positives
    positive_mask: np.ndarray  # (n_positions,) bool
    pos_clips: np.ndarray  # clip indices for contrastive sampling
    neg_clips: np.ndarray
    saliency_gt: np.ndarray | None  # (n_clips,)


def _admits(window_len: float, k: int, k_levels: int, clip_len: float) -> bool:
    if k == k_levels:
        return True
    return window_len < (2**k) * clip_len * LENGTH_RANGE_FACTOR


def assign_targets(
    ann: Annotation, level_lengths: list[int], clip_len: float
) -> MatchTargets:
    """Center-inside + per-level length-range positive assignment.

    A position is positive when its anchor center falls inside a GT window
    whose length the level admits; positions claimed by several windows take
    the shortest one. A window that ends up with no positive anywhere forces
    its nearest level-1 anchor positive (edge distances clamped to >= 0).
    """
    k_levels = len(level_lengths)
    n_total = int(sum(level_lengths))
    cls = np.zeros(n_total)
    reg = np.zeros((n_total, 2))
    owner_len = np.full(n_total, np.inf)  # shortest window owning the position
    covered = [False] * len(ann.relevant_windows)

    offset = 0
    for k, length in enumerate(level_lengths, start=1):
        centers = anchor_centers(length, k, clip_len)
        for wi, (ws, we) in enumerate(ann.relevant_windows):
            wlen = we - ws
            if not _admits(wlen, k, k_levels, clip_len):
                continue
            inside = (centers >= ws) & (centers < we)
            idx = np.flatnonzero(inside)
            if idx.size:
                covered[wi] = True
            for i in idx:
                pos = offset + i
                if wlen < owner_len[pos]:
                    owner_len[pos] = wlen
                    cls[pos] = 1.0
                    reg[pos, 0] = centers[i] - ws
                    reg[pos, 1] = we - centers[i]
        offset += length

    # coverage fallback: nearest level-1 anchor
    centers1 = anchor_centers(level_lengths[0], 1, clip_len)
    for wi, (ws, we) in enumerate(ann.relevant_windows):
        if covered[wi]:
            continue
        mid = 0.5 * (ws + we)
        i = int(np.argmin(np.abs(centers1 - mid)))
        cls[i] = 1.0
        reg[i, 0] = max(0.0, centers1[i] - ws)
        reg[i, 1] = max(0.0, we - centers1[i])

    if ann.relevant_clip_ids:
        pos_clips = np.asarray(sorted(set(ann.relevant_clip_ids)), dtype=np.int64)
    elif ann.saliency is not None:
        pos_clips = np.flatnonzero(np.asarray(ann.saliency) >= 0.5)
    else:
        pos_clips = np.zeros(0, dtype=np.int64)
    all_clips = np.arange(ann.n_clips)
    neg_clips = np.setdiff1d(all_clips, pos_clips)
    return MatchTargets(
        cls_labels=cls,
        reg_targets=reg,
        positive_mask=cls > 0.5,
        pos_clips=pos_clips,
        neg_clips=neg_clips,
        saliency_gt=np.asarray(ann.saliency) if ann.saliency is not None else None,
    )


# --- individual objectives --------------------------------------------------


def focal_loss(
    logits: Tensor,
    labels: np.ndarray,
    valid: np.ndarray | None = None,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Tensor:
    """Mean over valid positions of -alpha_t (1 - p_t)^gamma log p_t."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise ValueError("focal_loss label shape mismatch")
    m = np.ones_like(y) if valid is None else np.asarray(valid, dtype=np.float64)
    neg_logits = T.mul(logits, Tensor(-1.0))
    # label 1: p_t = sigmoid(x); label 0: p_t = sigmoid(-x)
    pos_term = T.mul(
        T.tpow(T.sigmoid(neg_logits), gamma), T.mul(T.log_sigmoid(logits), Tensor(-alpha))
    )
    neg_term = T.mul(
        T.tpow(T.sigmoid(logits), gamma),
        T.mul(T.log_sigmoid(neg_logits), Tensor(-(1.0 - alpha))),
    )
    per_pos = T.add(T.mul(pos_term, Tensor(y)), T.mul(neg_term, Tensor(1.0 - y)))
    n_valid = max(m.sum(), 1.0)
    return T.mul(T.tsum(T.mul(per_pos, Tensor(m))), Tensor(1.0 / n_valid))


def l1_loss(pred_offsets: Tensor, targets: np.ndarray, positive: np.ndarray) -> Tensor:
    """Mean absolute edge-distance error over positive positions (0 if none)."""
    pos = np.asarray(positive, dtype=bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        return Tensor(0.0)
    diff = T.tabs(T.sub(pred_offsets, Tensor(np.asarray(targets, dtype=np.float64))))
    weights = np.repeat(pos.astype(np.float64)[:, None], 2, axis=1)
    return T.mul(T.tsum(T.mul(diff, Tensor(weights))), Tensor(1.0 / (2.0 * n_pos)))


def expand_saliency_to_pyramid(
    s_gt: np.ndarray, level_lengths: list[int]
) -> np.ndarray:
    """Stride-2 max-pooling per level, so coarse levels keep short-moment peaks."""
    s = np.asarray(s_gt, dtype=np.float64)
    parts = []
    for k, length in enumerate(level_lengths, start=1):
        window = 2 ** (k - 1)
        part = np.array(
            [s[i * window : (i + 1) * window].max() for i in range(length)]
        )
        parts.append(part)
    return np.concatenate(parts)


def cas_loss(
    c_final: Tensor,
    s_gt_expanded: np.ndarray,
    valid: np.ndarray | None = None,
) -> Tensor:
    """MSE between min-max-normalized confidences and saliency targets."""
    n = c_final.data.shape[0]
    m = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    c_hat = T.min_max_normalize(c_final, m)
    target = np.asarray(s_gt_expanded, dtype=np.float64).copy()
    tvalid = target[m]
    span = tvalid.max() - tvalid.min()
    if span > 0:
        target = (target - tvalid.min()) / span
    else:
        target = np.zeros_like(target)
    target[~m] = 0.0
    diff = T.sub(c_hat, Tensor(target))
    return T.mul(T.tsum(T.mul(T.mul(diff, diff), Tensor(m.astype(np.float64)))), Tensor(1.0 / m.sum()))


def sampled_nce_loss(
    saliency: Tensor,
    pos_clips: np.ndarray,
    neg_clips: np.ndarray,
    rng: np.random.Generator,
    tau: float = 0.07,
    max_negatives: int = 8,
) -> Tensor:
    """InfoNCE over clips: every positive against up to 8 sampled negatives."""
    pos = np.asarray(pos_clips, dtype=np.int64)
    neg = np.asarray(neg_clips, dtype=np.int64)
    if pos.size == 0 or neg.size == 0:
        log.warning("sampled_nce_loss: empty positive or negative clip set; skipping")
        return Tensor(0.0)
    m = min(max_negatives, neg.size)
    sampled = np.stack(
        [rng.choice(neg, size=m, replace=False) for _ in pos]
    )  # (P, m)
    s_pos = T.take(saliency, pos)
    s_neg = T.reshape(T.take(saliency, sampled.reshape(-1)), (pos.size, m))
    inv_tau = Tensor(1.0 / tau)
    logits = T.concat(
        [T.reshape(T.mul(s_pos, inv_tau), (pos.size, 1)), T.mul(s_neg, inv_tau)],
        axis=1,
    )
    lse = T.logsumexp(logits, axis=1)
    return T.tmean(T.sub(lse, T.mul(s_pos, inv_tau)))


def saliency_margin_loss(
    saliency: Tensor,
    s_gt: np.ndarray,
    rng: np.random.Generator,
    margin: float = 0.2,
    max_pairs: int = 32,
    valid: np.ndarray | None = None,
) -> Tensor:
    """Hinge on sampled (higher-GT, lower-GT) clip pairs."""
    gt = np.asarray(s_gt, dtype=np.float64)
    m = np.ones_like(gt, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    gt_masked = np.where(m, gt, -np.inf)
    hi_idx, lo_idx = np.nonzero(gt_masked[:, None] > gt_masked[None, :])
    keep = m[hi_idx] & m[lo_idx]
    hi_idx, lo_idx = hi_idx[keep], lo_idx[keep]
    if hi_idx.size == 0:
        return Tensor(0.0)
    if hi_idx.size > max_pairs:
        pick = rng.choice(hi_idx.size, size=max_pairs, replace=False)
        hi_idx, lo_idx = hi_idx[pick], lo_idx[pick]
    diff = T.sub(T.take(saliency, hi_idx), T.take(saliency, lo_idx))
    return T.tmean(T.relu(T.sub(Tensor(margin), diff)))


def overall_loss(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum; absent components contribute nothing."""
    total = Tensor(0.0)
    for key, w in (
        ("reg", weights.reg),
        ("cls", weights.cls),
        ("cas", weights.cas),
        ("snce", weights.snce),
        ("sal", weights.sal),
    ):
        if key in components and w != 0.0:
            total = T.add(total, T.mul(components[key], Tensor(w)))
    return total


# --- full-model objective ---------------------------------------------------


def sample_loss(
    out,
    ann: Annotation,
    weights: LossWeights,
    seed: int,
    clip_len: float,
) -> tuple[Tensor, dict[str, float]]:
    """All objectives for one forward pass; sampling is frozen per (seed, qid)."""
    qid_key = int.from_bytes(ann.qid.encode("utf-8")[-4:].rjust(4, b"\0"), "big")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(qid_key,)))
    level_lengths = out.level_lengths
    targets = assign_targets(ann, level_lengths, clip_len)
    valid = out.pyramid_mask

    components: dict[str, Tensor] = {}
    components["cls"] = focal_loss(out.scores.pre_mix, targets.cls_labels, valid)
    offsets_all = T.concat(out.offsets, axis=0)
    components["reg"] = l1_loss(offsets_all, targets.reg_targets, targets.positive_mask)
    if targets.saliency_gt is not None:
        expanded = expand_saliency_to_pyramid(targets.saliency_gt, level_lengths)
        components["cas"] = cas_loss(out.scores.c_final, expanded, valid)
        components["sal"] = saliency_margin_loss(
            out.saliency, targets.saliency_gt, rng, valid=ann_mask(ann)
        )
    else:
        log.warning("%s: no saliency targets; CAS and ranking losses skipped", ann.qid)
    components["snce"] = sampled_nce_loss(
        out.saliency, targets.pos_clips, targets.neg_clips, rng
    )
    total = overall_loss(components, weights)
    breakdown = {k: float(v.data) for k, v in components.items()}
    breakdown["total"] = float(total.data)
    return total, breakdown


def ann_mask(ann: Annotation) -> np.ndarray:
    return np.ones(ann.n_clips, dtype=bool)
