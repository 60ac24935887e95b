"""Temporal grounding metrics (IoU, R@1, event F1) and a caption-overlap proxy."""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import _kernels
from .domain import AnnotationSample, Interval, canonical_json
from .losses import ArityMismatch

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


class MissingPrediction(KeyError):
    def __init__(self, sample_id):
        super().__init__(f"no prediction for sample {sample_id!r}")
        self.sample_id = sample_id


def iou(a: Interval, b: Interval) -> float:
    """Intersection over union with inclusive frame counts."""
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def iou_matrix(preds: Sequence[Interval], gts: Sequence[Interval]) -> np.ndarray:
    m = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            m[i, j] = iou(p, g)
    return m


def recall_at_1(preds: Sequence[Interval | None], gts: Sequence[Interval],
                thresholds: Iterable[float] = DEFAULT_THRESHOLDS) -> dict[float, float]:
    """Fraction of samples whose top prediction reaches each IoU threshold (None counts as a miss)."""
    if len(preds) != len(gts) or not gts:
        raise ArityMismatch(f"{len(preds)} predictions for {len(gts)} samples")
    scores = [0.0 if p is None else iou(p, g) for p, g in zip(preds, gts)]
    return {float(t): sum(s >= t for s in scores) / len(scores) for t in thresholds}


@dataclass(frozen=True)
class EventF1:
    precision: float
    recall: float
    f1: float
    matching: tuple[tuple[int, int], ...]
    n_pred: int
    n_gt: int

    @property
    def n_matched(self) -> int:
        return len(self.matching)


def f1_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def match_events(preds: Sequence[Interval], gts: Sequence[Interval], iou_thresh: float = 0.5,
                 matching: str = "optimal") -> list[tuple[int, int]]:
    """One-to-one (pred, gt) pairs with IoU >= threshold.

    ``greedy`` takes pairs in descending IoU order. ``optimal`` maximizes the
    number of matches (then total IoU); the two agree whenever each list is
    internally non-overlapping and the threshold is at least 0.5.
    """
    if not preds or not gts:
        return []
    ious = iou_matrix(preds, gts)
    if matching == "greedy":
        return [tuple(p) for p in _kernels.greedy_match(ious, iou_thresh)]
    if matching != "optimal":
        raise ValueError(f"unknown matching rule {matching!r}")
    adj = ious >= iou_thresh
    big = min(len(preds), len(gts)) + 1.0
    weight = np.where(adj, big + ious, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    return sorted((int(r), int(c)) for r, c in zip(rows, cols) if adj[r, c])


def event_f1(preds: Sequence[Interval], gts: Sequence[Interval], iou_thresh: float = 0.5,
             matching: str = "optimal") -> EventF1:
    pairs = match_events(preds, gts, iou_thresh, matching)
    if not preds and not gts:
        return EventF1(1.0, 1.0, 1.0, (), 0, 0)
    p = len(pairs) / len(preds) if preds else 0.0
    r = len(pairs) / len(gts) if gts else 0.0
    return EventF1(p, r, f1_score(p, r), tuple(pairs), len(preds), len(gts))


def caption_overlap_f1(pred: Sequence[int], gt: Sequence[int]) -> float:
    """Token-multiset F1; a cheap stand-in for sentence similarity."""
    if not pred and not gt:
        return 1.0
    if not pred or not gt:
        return 0.0
    common = sum((collections.Counter(pred) & collections.Counter(gt)).values())
    return f1_score(common / len(pred), common / len(gt))


# ------------------------------------------------------------------ reports

@dataclass(frozen=True)
class Prediction:
    sample_id: str
    intervals: tuple[Interval, ...]
    text: tuple[int, ...] = ()
    grounding_intervals: tuple[Interval, ...] = ()
    truncated: bool = False
    disagreements: int = 0
    n_refs: int = 0


@dataclass
class EvalReport:
    config: dict
    aggregates: dict[str, float]
    per_sample: list[dict] = field(default_factory=list)

    def to_document(self) -> dict:
        return {"config": self.config, "aggregates": self.aggregates, "per_sample": self.per_sample}

    def to_json(self) -> bytes:
        return canonical_json(self.to_document())

    def to_tsv(self) -> str:
        lines = ["metric\tvalue"]
        for k in sorted(self.aggregates):
            lines.append(f"{k}\t{self.aggregates[k]!r}")
        return "\n".join(lines) + "\n"


def _thr_key(t: float) -> str:
    return f"{t:g}"


def evaluate(predictions: Mapping[str, Prediction] | Sequence[Prediction], dataset: Sequence[AnnotationSample],
             thresholds: Iterable[float] = DEFAULT_THRESHOLDS, iou_thresh: float = 0.5,
             matching: str = "optimal", extra_config: dict | None = None) -> EvalReport:
    """Join predictions to samples by id and aggregate.

    R@1 is taken over single-event samples using the first predicted interval.
    Event precision/recall/F1 are pooled over all events; ``event_f1_macro`` is
    the per-sample mean.
    """
    if not isinstance(predictions, Mapping):
        predictions = {p.sample_id: p for p in predictions}
    thresholds = sorted({float(t) for t in thresholds})
    per_sample = []
    single_preds, single_gts = [], []
    for s in dataset:
        if s.sample_id not in predictions:
            raise MissingPrediction(s.sample_id)
        pred = predictions[s.sample_id]
        ef = event_f1(list(pred.intervals), list(s.time_gt), iou_thresh, matching)
        ious = [iou(pred.intervals[i], s.time_gt[j]) for i, j in ef.matching]
        rec = {
            "id": s.sample_id,
            "gt": [iv.to_list() for iv in s.time_gt],
            "pred": [iv.to_list() for iv in pred.intervals],
            "matching": [list(m) for m in ef.matching],
            "matched_iou": ious,
            "n_pred": ef.n_pred,
            "n_gt": ef.n_gt,
            "n_matched": ef.n_matched,
            "precision": ef.precision,
            "recall": ef.recall,
            "f1": ef.f1,
            "sim_proxy": caption_overlap_f1(pred.text, s.response.text_tokens()),
            "truncated": pred.truncated,
            "disagreements": pred.disagreements,
            "n_refs": pred.n_refs,
        }
        if s.K == 1:
            top = pred.intervals[0] if pred.intervals else None
            top_iou = 0.0 if top is None else iou(top, s.time_gt[0])
            rec["top1_iou"] = top_iou
            single_preds.append(top)
            single_gts.append(s.time_gt[0])
        per_sample.append(rec)

    n = len(per_sample)
    agg: dict[str, float] = {"n_samples": float(n)}
    tot_pred = sum(r["n_pred"] for r in per_sample)
    tot_gt = sum(r["n_gt"] for r in per_sample)
    tot_match = sum(r["n_matched"] for r in per_sample)
    if tot_pred == 0 and tot_gt == 0:
        p = r_ = 1.0
    else:
        p = tot_match / tot_pred if tot_pred else 0.0
        r_ = tot_match / tot_gt if tot_gt else 0.0
    agg.update({
        "event_precision": p,
        "event_recall": r_,
        "event_f1": f1_score(p, r_) if (tot_pred or tot_gt) else 1.0,
        "event_f1_macro": math.fsum(r["f1"] for r in per_sample) / n if n else 0.0,
        "sim_proxy": math.fsum(r["sim_proxy"] for r in per_sample) / n if n else 0.0,
        "n_gt_events": float(tot_gt),
        "n_pred_events": float(tot_pred),
        "n_matched": float(tot_match),
        "n_single_event": float(len(single_gts)),
        "truncated_rate": sum(r["truncated"] for r in per_sample) / n if n else 0.0,
    })
    refs = sum(r["n_refs"] for r in per_sample)
    agg["regrounding_disagreement"] = sum(r["disagreements"] for r in per_sample) / refs if refs else 0.0
    if single_gts:
        for t, v in recall_at_1(single_preds, single_gts, thresholds).items():
            agg[f"R@1(IoU={_thr_key(t)})"] = v
    config = {
        "iou_thresh": iou_thresh,
        "matching": matching,
        "matching_rule": ("one-to-one; " + ("descending-IoU greedy" if matching == "greedy"
                          else "maximum cardinality, ties by total IoU")),
        "thresholds": thresholds,
        "r_at_1_scope": "single-event samples, first predicted interval",
        "sim_proxy": "token-multiset F1 of answer text; not a sentence-embedding similarity",
        "empty_vs_empty_f1": 1.0,
    }
    config.update(extra_config or {})
    return EvalReport(config, agg, per_sample)


def prediction_from_generation(sample_id: str, result, interval_source: str = "answer") -> Prediction:
    ivs = tuple(result.intervals(interval_source))
    return Prediction(sample_id, ivs, tuple(result.response.text_tokens()),
                      tuple(result.grounding_intervals), result.truncated,
                      result.regrounding_disagreements, result.n_refs)
