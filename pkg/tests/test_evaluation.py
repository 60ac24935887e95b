import itertools
import json
import random

import numpy as np
import pytest

from evigrid.domain import Interval
from evigrid.evaluation import (MissingPrediction, Prediction, caption_overlap_f1, evaluate, event_f1, iou,
                                match_events, recall_at_1)
from evigrid.losses import ArityMismatch
from evigrid.model import GeneratorConfig, make_toy_dataset


def test_iou_pins():
    assert iou(Interval(3, 7), Interval(3, 7)) == 1.0
    assert iou(Interval(0, 9), Interval(5, 14)) == 5 / 15
    assert iou(Interval(0, 1), Interval(5, 6)) == 0.0


def test_recall_at_1():
    gts = [Interval(0, 3), Interval(2, 8)]
    assert recall_at_1(gts, gts, (0.3, 0.5, 0.7)) == {0.3: 1.0, 0.5: 1.0, 0.7: 1.0}
    r = recall_at_1([Interval(0, 9)], [Interval(5, 14)], (0.5, 0.7))
    assert r == {0.5: 0.0, 0.7: 0.0}
    assert recall_at_1([None], [Interval(0, 1)], (0.5,)) == {0.5: 0.0}
    with pytest.raises(ArityMismatch):
        recall_at_1([], [Interval(0, 1)])


def test_event_f1_counting():
    gts = [Interval(0, 2), Interval(5, 7), Interval(10, 12)]
    assert event_f1(gts, gts).f1 == 1.0
    r = event_f1(gts + [Interval(20, 22)], gts)
    assert r.precision == 3 / 4 and r.recall == 1.0
    assert event_f1([], []).f1 == 1.0
    assert event_f1([], gts).f1 == 0.0


def test_optimal_beats_greedy_on_overlapping_lists():
    gts = [Interval(0, 9), Interval(2, 11)]
    preds = [Interval(0, 9), Interval(0, 5)]
    assert len(match_events(preds, gts, 0.5, "greedy")) == 1
    assert len(match_events(preds, gts, 0.5, "optimal")) == 2


def _brute_force_matches(preds, gts, thresh):
    best = 0
    n = min(len(preds), len(gts))
    for perm in itertools.permutations(range(len(gts)), n) if len(preds) <= len(gts) else []:
        best = max(best, sum(iou(preds[i], gts[j]) >= thresh for i, j in enumerate(perm)))
    if len(preds) > len(gts):
        for perm in itertools.permutations(range(len(preds)), n):
            best = max(best, sum(iou(preds[i], gts[j]) >= thresh for j, i in enumerate(perm)))
    return best


def _random_events(rng, k, T=30):
    cuts = sorted(rng.sample(range(T + 1), 2 * k))
    return [Interval(cuts[2 * i], cuts[2 * i + 1] - 1) for i in range(k)]


def test_greedy_equals_brute_force_small():
    rng = random.Random(0)
    for _ in range(2000):
        preds = _random_events(rng, rng.randint(0, 4))
        gts = _random_events(rng, rng.randint(0, 4))
        want = _brute_force_matches(preds, gts, 0.5)
        assert len(match_events(preds, gts, 0.5, "greedy")) == want
        assert len(match_events(preds, gts, 0.5, "optimal")) == want


def test_caption_overlap():
    assert caption_overlap_f1([1, 2], [1, 2]) == 1.0
    assert caption_overlap_f1([1, 2], [3, 4]) == 0.0
    assert caption_overlap_f1([1, 2], [1, 3]) == 0.5


def _perfect(data):
    return [Prediction(s.sample_id, s.time_gt, tuple(s.response.text_tokens())) for s in data]


def test_evaluate_perfect_and_order_free():
    data = make_toy_dataset(30, GeneratorConfig(), 1)
    rep = evaluate(_perfect(data), data)
    for k in ("event_precision", "event_recall", "event_f1", "event_f1_macro", "sim_proxy", "R@1(IoU=0.5)"):
        assert rep.aggregates[k] == 1.0
    shuffled = _perfect(data)[::-1]
    assert evaluate(shuffled, data).to_json() == rep.to_json()


def test_evaluate_totals_recomputed():
    data = make_toy_dataset(40, GeneratorConfig(), 2)
    rng = np.random.default_rng(0)
    preds = []
    for s in data:
        ivs = []
        for iv in s.time_gt[: int(rng.integers(0, s.K + 1))]:
            a = min(s.T - 1, max(0, iv.start + int(rng.integers(-2, 3))))
            b = min(s.T - 1, max(a, iv.end + int(rng.integers(-2, 3))))
            ivs.append(Interval(a, b))
        preds.append(Prediction(s.sample_id, tuple(ivs), ()))
    rep = evaluate(preds, data)
    matched = sum(r["n_matched"] for r in rep.per_sample)
    n_pred = sum(r["n_pred"] for r in rep.per_sample)
    n_gt = sum(r["n_gt"] for r in rep.per_sample)
    assert rep.aggregates["event_recall"] == pytest.approx(matched / n_gt)
    assert rep.aggregates["event_precision"] == pytest.approx(matched / n_pred if n_pred else 0.0)
    assert rep.aggregates["event_f1_macro"] == pytest.approx(np.mean([r["f1"] for r in rep.per_sample]))
    doc = json.loads(rep.to_json())
    assert doc["aggregates"]["n_samples"] == 40
    assert rep.to_tsv().count("\n") == 1 + len(rep.aggregates)


def test_evaluate_missing_prediction():
    data = make_toy_dataset(3, GeneratorConfig(), 2)
    with pytest.raises(MissingPrediction):
        evaluate(_perfect(data)[:2], data)


def test_evaluate_threshold_keys():
    data = make_toy_dataset(5, GeneratorConfig(), 2)
    rep = evaluate(_perfect(data), data, thresholds=(0.5, 0.7))
    assert "R@1(IoU=0.5)" in rep.aggregates and "R@1(IoU=0.7)" in rep.aggregates
