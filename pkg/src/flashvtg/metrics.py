"""Moment-retrieval and highlight-detection metrics.

Boundary conventions, frozen here and exercised against brute-force
oracles in the tests: recall@X uses strict IoU > X, AP matching uses
IoU >= threshold, AP is interpolated with the precision envelope, and
ties in ranking break by earlier start, then earlier end, then index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import Annotation

MAP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
SHORT_MAX_SECONDS = 10.0
MIDDLE_MAX_SECONDS = 30.0
HD_POSITIVE_THRESHOLD = 0.5


@dataclass
class PredictionSet:
    qid: str
    moments: list[tuple[float, float, float]]  # (start, end, confidence), conf-desc
    saliency: np.ndarray | None = None

    def top1(self):
        return self.moments[0] if self.moments else None


@dataclass
class MetricReport:
    r1_at_03: float
    r1_at_05: float
    r1_at_07: float
    map_at_05: float
    map_at_075: float
    map_avg: float
    miou: float
    short_map: float | None
    middle_map: float | None
    long_map: float | None
    hd_map: float | None
    hd_hit1: float | None
    n_queries: int
    n_hd_excluded: int = 0
    bucket_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "R1@0.3": self.r1_at_03,
            "R1@0.5": self.r1_at_05,
            "R1@0.7": self.r1_at_07,
            "mAP@0.5": self.map_at_05,
            "mAP@0.75": self.map_at_075,
            "mAP_avg": self.map_avg,
            "mIoU": self.miou,
            "short_mAP": self.short_map,
            "middle_mAP": self.middle_map,
            "long_mAP": self.long_map,
            "HD_mAP": self.hd_map,
            "HD_Hit@1": self.hd_hit1,
            "n_queries": self.n_queries,
            "n_hd_excluded": self.n_hd_excluded,
            "bucket_counts": self.bucket_counts,
        }


def temporal_iou(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    if union <= 0.0:
        return 0.0
    return inter / union


def _sorted_moments(moments):
    return sorted(moments, key=lambda m: (-m[2], m[0], m[1]))


def nms(moments, iou_thr: float = 0.7):
    """Greedy suppression: keep in confidence order, drop anything whose IoU
    with a kept moment exceeds the threshold."""
    kept = []
    for cand in _sorted_moments(moments):
        if all(temporal_iou(cand, k) <= iou_thr for k in kept):
            kept.append(tuple(cand))
    return kept


def recall1_at(preds: list[PredictionSet], gts: dict[str, Annotation], thr: float) -> float:
    """Fraction of queries whose top-confidence moment has IoU strictly above
    the threshold with any GT window. Queries without predictions miss."""
    if not preds:
        return 0.0
    hits = 0
    for p in preds:
        top = p.top1()
        if top is None:
            continue
        best = max(temporal_iou(top, w) for w in gts[p.qid].relevant_windows)
        if best > thr:
            hits += 1
    return hits / len(preds)


def miou(preds: list[PredictionSet], gts: dict[str, Annotation]) -> float:
    if not preds:
        return 0.0
    total = 0.0
    for p in preds:
        top = p.top1()
        if top is None:
            continue
        total += max(temporal_iou(top, w) for w in gts[p.qid].relevant_windows)
    return total / len(preds)


def _query_ap(moments, windows, thr: float) -> float:
    """Average precision for one query at one IoU threshold.

    Predictions are matched greedily in confidence order to the unmatched GT
    window of highest IoU >= thr; AP integrates the precision envelope.
    """
    n_gt = len(windows)
    if n_gt == 0:
        return 0.0
    matched = [False] * n_gt
    tp_flags = []
    for m in _sorted_moments(moments):
        best_iou, best_j = 0.0, -1
        for j, w in enumerate(windows):
            if matched[j]:
                continue
            iou = temporal_iou(m, w)
            if iou >= thr and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[best_j] = True
            tp_flags.append(1)
        else:
            tp_flags.append(0)
    if not tp_flags:
        return 0.0
    tps = np.cumsum(tp_flags)
    precision = tps / np.arange(1, len(tp_flags) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = sum(envelope[i] for i, f in enumerate(tp_flags) if f) / n_gt
    return float(ap)


def map_mr(
    preds: list[PredictionSet],
    gts: dict[str, Annotation],
    thresholds=MAP_THRESHOLDS,
) -> tuple[dict[float, float], float]:
    """Per-threshold mean AP over queries plus the average over thresholds."""
    per_thr = {}
    for thr in thresholds:
        if preds:
            aps = [
                _query_ap(p.moments, gts[p.qid].relevant_windows, thr) for p in preds
            ]
            per_thr[float(thr)] = float(np.mean(aps))
        else:
            per_thr[float(thr)] = 0.0
    avg = float(np.mean(list(per_thr.values()))) if per_thr else 0.0
    return per_thr, avg


def _ranking(scores: np.ndarray) -> np.ndarray:
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=float)))
    return order


def hd_metrics(
    preds: list[PredictionSet],
    gts: dict[str, Annotation],
    positive_thr: float = HD_POSITIVE_THRESHOLD,
):
    """(mAP of clip rankings, Hit@1, excluded count).

    Clips with GT saliency >= positive_thr are relevant. Queries without
    saliency GT or without any relevant clip are excluded from both metrics
    and counted.
    """
    aps, hits, excluded = [], [], 0
    for p in preds:
        ann = gts[p.qid]
        if ann.saliency is None or p.saliency is None:
            excluded += 1
            continue
        rel = np.asarray(ann.saliency) >= positive_thr
        if not rel.any():
            excluded += 1
            continue
        order = _ranking(np.asarray(p.saliency))
        rel_sorted = rel[order]
        tps = np.cumsum(rel_sorted)
        precision = tps / np.arange(1, len(rel_sorted) + 1)
        aps.append(float(precision[rel_sorted].mean()))
        hits.append(1.0 if rel_sorted[0] else 0.0)
    if not aps:
        return None, None, excluded
    return float(np.mean(aps)), float(np.mean(hits)), excluded


def bucket_of_length(length: float) -> str:
    if length < SHORT_MAX_SECONDS:
        return "short"
    if length <= MIDDLE_MAX_SECONDS:
        return "middle"
    return "long"


def _matched_window(p: PredictionSet, ann: Annotation):
    """The GT window the top prediction overlaps most (first window when the
    query has no predictions)."""
    top = p.top1()
    if top is None:
        return ann.relevant_windows[0]
    best = max(
        ann.relevant_windows,
        key=lambda w: (temporal_iou(top, w), -w[0]),
    )
    return best


def stratified_map(
    preds: list[PredictionSet], gts: dict[str, Annotation]
) -> tuple[dict[str, float | None], dict[str, int]]:
    """mAP (threshold-averaged) per GT-length bucket; empty buckets are None."""
    buckets: dict[str, list[PredictionSet]] = {"short": [], "middle": [], "long": []}
    for p in preds:
        w = _matched_window(p, gts[p.qid])
        buckets[bucket_of_length(w[1] - w[0])].append(p)
    result: dict[str, float | None] = {}
    counts: dict[str, int] = {}
    for name, members in buckets.items():
        counts[name] = len(members)
        if members:
            _, avg = map_mr(members, gts)
            result[name] = avg
        else:
            result[name] = None
    return result, counts


def evaluate_predictions(
    preds: list[PredictionSet], gts: dict[str, Annotation]
) -> MetricReport:
    per_thr, avg = map_mr(preds, gts)
    strat, counts = stratified_map(preds, gts)
    hd_map, hd_hit1, excluded = hd_metrics(preds, gts)
    return MetricReport(
        r1_at_03=recall1_at(preds, gts, 0.3),
        r1_at_05=recall1_at(preds, gts, 0.5),
        r1_at_07=recall1_at(preds, gts, 0.7),
        map_at_05=per_thr[0.5],
        map_at_075=per_thr[0.75],
        map_avg=avg,
        miou=miou(preds, gts),
        short_map=strat["short"],
        middle_map=strat["middle"],
        long_map=strat["long"],
        hd_map=hd_map,
        hd_hit1=hd_hit1,
        n_queries=len(preds),
        n_hd_excluded=excluded,
        bucket_counts=counts,
    )


# --- prediction-file round trip -----------------------------------------------


def save_predictions(path, preds: list[PredictionSet]) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            obj = {
                "qid": p.qid,
                "moments": [[float(s), float(e), float(c)] for s, e, c in p.moments],
            }
            if p.saliency is not None:
                obj["saliency"] = [float(x) for x in p.saliency]
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_predictions(path) -> list[PredictionSet]:
    import json

    preds = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            preds.append(
                PredictionSet(
                    qid=str(obj["qid"]),
                    moments=[tuple(m) for m in obj["moments"]],
                    saliency=(
                        np.asarray(obj["saliency"], dtype=np.float64)
                        if obj.get("saliency") is not None
                        else None
                    ),
                )
            )
    return preds
