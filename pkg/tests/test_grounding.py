import math

import numpy as np
import pytest

from evigrid import autograd as ag
from evigrid import grounding as gr
from evigrid.domain import Interval


def test_project_zero_weights():
    z = lambda *s: ag.const(np.zeros(s))  # noqa: E731
    out = gr.project_evidence(ag.const(np.ones((1, 4))), z(4, 4), z(1, 4), z(4, 4), z(1, 4))
    assert np.array_equal(out.value, np.zeros((1, 4)))


def test_project_identity_second_layer_gives_bias():
    b2 = np.array([[0.5, -1.0, 2.0]])
    out = gr.project_evidence(ag.const(np.ones((1, 3))), ag.const(np.zeros((3, 3))), ag.const(np.zeros((1, 3))),
                              ag.const(np.eye(3)), ag.const(b2))
    assert np.allclose(out.value, b2)


def test_project_grad_check():
    rng = np.random.default_rng(0)
    store = ag.ParamStore()
    for n, shp in (("w1", (4, 4)), ("b1", (1, 4)), ("w2", (4, 4)), ("b2", (1, 4))):
        store.add(n, rng.standard_normal(shp))
    x = ag.const(rng.standard_normal((1, 4)))

    def loss(s):
        y = gr.project_evidence(x, s["w1"], s["b1"], s["w2"], s["b2"])
        return ag.reduce_sum(ag.mul(y, y))

    assert ag.grad_check(loss, store) < 1e-4


def test_similarities_zero_query():
    s = gr.frame_similarities(ag.const(np.zeros((1, 3))), ag.const(np.ones((5, 3)))).value
    assert np.array_equal(s, np.full((1, 5), 0.5))


def test_similarities_pinned_case():
    s = gr.frame_similarities(ag.const([[2.0]]), ag.const([[2.0], [0.0], [-2.0]])).value[0]
    assert s == pytest.approx([0.9820137900379085, 0.5, 0.01798620996209156], abs=1e-12)
    assert np.round(s, 4).tolist() == [0.982, 0.5, 0.018]


def test_similarity_order_preserved_under_positive_scaling():
    rng = np.random.default_rng(2)
    q, f = rng.standard_normal((1, 6)), rng.standard_normal((9, 6))
    a = gr.frame_similarities(ag.const(q), ag.const(f)).value[0]
    b = gr.frame_similarities(ag.const(3.7 * q), ag.const(f)).value[0]
    assert np.array_equal(np.argsort(a), np.argsort(b))


def test_select_salient_infer_pinned():
    prof = gr.SimilarityProfile(np.array([0.9, 0.2, 0.6]))
    assert gr.select_salient(prof, gr.Infer(gr.GroundingConfig(salient_ratio=0.6))).tolist() == [0, 2]


def test_select_salient_constant_and_train():
    prof = gr.SimilarityProfile(np.full(8, 0.3))
    assert gr.select_salient(prof, gr.Infer()).tolist() == list(range(8))
    assert gr.select_salient(prof, gr.Train(Interval(2, 5))).tolist() == [2, 3, 4, 5]
    with pytest.raises(gr.IntervalOutOfRange):
        gr.select_salient(prof, gr.Train(Interval(2, 8)))


def test_aggregate_semantics_cases():
    evi = ag.const([[0.0, 0.0]])
    frames = ag.const([[1.0, 1.0], [9.0, 9.0], [3.0, 3.0]])
    assert gr.aggregate_semantics(evi, frames, [0, 2]).value.tolist() == [[2.0, 2.0]]
    assert gr.aggregate_semantics(ag.const([[1.0, -1.0]]), frames, [1]).value.tolist() == [[10.0, 8.0]]
    const = ag.const(np.tile([[0.5, 0.25]], (4, 1)))
    assert gr.aggregate_semantics(evi, const, range(4)).value.tolist() == [[0.5, 0.25]]
    with pytest.raises(gr.EmptySalientError):
        gr.aggregate_semantics(evi, frames, [])


def test_intervals_from_salient():
    prof = gr.SimilarityProfile(np.array([0.5, 0.9, 0.6, 0.1, 0.2]))
    for mode in gr.IntervalMode:
        assert gr.intervals_from_salient([0, 1, 2], prof, mode) == Interval(0, 2)
    prof = gr.SimilarityProfile(np.array([0.7, 0.7, 0.1, 0.1, 0.95, 0.8]))
    assert gr.intervals_from_salient([0, 1, 4, 5], prof, gr.IntervalMode.RUN_OF_ARGMAX) == Interval(4, 5)
    assert gr.intervals_from_salient([0, 1, 4, 5], prof, gr.IntervalMode.FULL_SPAN) == Interval(0, 5)
    assert gr.intervals_from_salient([3], prof, gr.IntervalMode.RUN_OF_ARGMAX) == Interval(3, 3)


def test_ground_is_consistent_with_select():
    prof = gr.SimilarityProfile(np.array([0.1, 0.8, 0.9, 0.2, 0.85]))
    salient, iv = gr.ground(prof)
    assert salient.tolist() == [1, 2, 4]
    assert iv == Interval(1, 2)


def test_profile_validation():
    with pytest.raises(ValueError):
        gr.SimilarityProfile(np.array([0.0, 0.5]))
    with pytest.raises(ValueError):
        gr.GroundingConfig(salient_ratio=0.0)
    assert math.isclose(gr.SimilarityProfile([0.3]).sims[0], 0.3)
