import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evigrid import autograd as ag
from evigrid._kernels import _pykernels
from evigrid.domain import Interval, InvariantError, parse_annotation, same_sample, serialize_annotation
from evigrid.evaluation import event_f1, iou, recall_at_1
from evigrid.fpo import FpoConfig, ResponseLogProb, fpo_loss
from evigrid.losses import loss_gnd
from evigrid.model import GeneratorConfig, make_toy_sample
from evigrid.synth import SynthConfig, VocabInfo, synthesize_for
from evigrid.domain import validate_pair
from evigrid import _kernels

from conftest import make_sample

EPS = 1e-7


@st.composite
def intervals(draw, T=40):
    a = draw(st.integers(0, T - 1))
    b = draw(st.integers(a, T - 1))
    return Interval(a, b)


@given(st.integers(-5, 40), st.integers(-5, 40))
def test_interval_accepts_exactly_ordered_nonnegative(a, b):
    if 0 <= a <= b:
        iv = Interval(a, b)
        assert iv.length == b - a + 1 == len(iv.frames())
    else:
        with pytest.raises(InvariantError):
            Interval(a, b)


@given(intervals(), intervals())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v > 0) == a.overlaps(b)
    assert iou(a, a) == 1.0


@given(st.lists(st.tuples(intervals(), intervals()), min_size=1, max_size=8),
       st.floats(0, 1), st.floats(0, 1))
def test_recall_monotone_in_threshold(pairs, t1, t2):
    lo, hi = sorted((t1, t2))
    preds, gts = zip(*pairs)
    r = recall_at_1(list(preds), list(gts), (lo, hi))
    assert r[lo] >= r[hi]
    assert all(0 <= x <= 1 for x in r.values())


@given(st.lists(intervals(), max_size=5), st.lists(intervals(), max_size=5))
def test_event_f1_bounds(preds, gts):
    res = event_f1(preds, gts)
    assert 0 <= res.n_matched <= min(len(preds), len(gts))
    assert 0.0 <= res.f1 <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_annotation_round_trip(seed):
    s = make_toy_sample(GeneratorConfig(), seed, f"s{seed}")
    data = serialize_annotation(s)
    back = parse_annotation(data)
    assert same_sample(s, back)
    assert serialize_annotation(back) == data


@given(st.floats(-50, 50), st.integers(1, 12), st.data())
def test_grounding_loss_finite_for_saturated_logits(x, T, data):
    a = data.draw(st.integers(0, T - 1))
    b = data.draw(st.integers(a, T - 1))
    logits = ag.Node(np.full((1, T), x), requires_grad=True)
    loss = loss_gnd(ag.logistic(logits), [Interval(a, b)])
    ag.backward(loss)
    assert math.isfinite(loss.item()) and loss.item() >= 0
    assert np.all(np.isfinite(logits.grad))


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.05, 5))
def test_fpo_loss_finite_and_positive(p, d, beta):
    c = lambda v: ag.const([[v]])  # noqa: E731
    v = fpo_loss(ResponseLogProb(c(p), c(0.0), c(p)), ResponseLogProb(c(d), c(0.0), c(d)), FpoConfig(beta=beta)).item()
    assert math.isfinite(v) and v >= 0
    assert v == pytest.approx(math.log1p(math.exp(-beta * (p - d))), rel=1e-9, abs=1e-12)


def _brute(sims):
    s = np.clip(sims, EPS, 1 - EPS)
    best = None
    for a, b in itertools.combinations_with_replacement(range(len(s)), 2):
        y = np.zeros(len(s))
        y[a:b + 1] = 1
        ll = math.fsum(y * np.log(s) + (1 - y) * np.log1p(-s))
        if best is None or ll > best[2] + 1e-12:
            best = (a, b, ll)
    return best


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_best_interval_matches_brute_force(vals):
    sims = np.array(vals)
    a, b, ll = _pykernels.best_interval(sims, EPS)
    ba, bb, bll = _brute(sims)
    assert ll == pytest.approx(bll, abs=1e-9)
    ka, kb, kll = _kernels.best_interval(sims, EPS)
    assert kll == pytest.approx(bll, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_synthesized_pairs_always_valid(seed):
    g = GeneratorConfig()
    s = make_toy_sample(g, seed, f"h{seed}")
    pair = synthesize_for(s, SynthConfig(vocab=VocabInfo.from_generator(g)))
    assert validate_pair(pair) == []
