import math

import numpy as np
import pytest

from evigrid import autograd as ag
from evigrid.domain import Interval
from evigrid.losses import (BCE_EPS, ArityMismatch, EmptyMaskError, loss_cons, loss_gnd, loss_gnd_single, loss_sft,
                            loss_total)


def test_sft_perfect_model_is_zero():
    lp = np.full((3, 4), -np.inf)
    lp[[0, 1, 2], [1, 2, 3]] = 0.0
    lp = np.where(np.isinf(lp), -50.0, lp)
    assert loss_sft(ag.const(lp), [1, 2, 3]).item() == 0.0


def test_sft_uniform_vocab():
    lp = np.full((5, 64), -math.log(64))
    assert loss_sft(ag.const(lp), [0, 1, 2, 3, 4]).item() == pytest.approx(math.log(64), abs=1e-12)


def test_sft_pinned_mean():
    lp = np.log(np.array([[0.5, 0.5], [0.25, 0.75]]))
    v = loss_sft(ag.const(lp), [0, 0]).item()
    assert v == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)
    assert round(v, 4) == 1.0397


def test_sft_mask_and_arity():
    lp = ag.const(np.log(np.full((2, 2), 0.5)))
    with pytest.raises(EmptyMaskError):
        loss_sft(lp, [0, 1], mask=[False, False])
    with pytest.raises(ArityMismatch):
        loss_sft(lp, [0])


def test_gnd_perfect_and_uniform():
    T = 10
    gt = Interval(2, 5)
    s = np.full((1, T), BCE_EPS)
    s[0, 2:6] = 1 - BCE_EPS
    assert loss_gnd_single(ag.const(s), gt).item() < 1e-6
    assert loss_gnd_single(ag.const(np.full((1, T), 0.5)), gt).item() == pytest.approx(math.log(2), abs=1e-12)


def test_gnd_pinned_two_frames():
    v = loss_gnd_single(ag.const([[0.9, 0.2]]), Interval(0, 0)).item()
    assert v == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-12)
    assert round(v, 4) == 0.1643


def test_gnd_multi_profile():
    T = 6
    gt = Interval(1, 3)
    perfect = np.full(T, BCE_EPS)
    perfect[1:4] = 1 - BCE_EPS
    both = np.vstack([perfect, perfect])
    assert loss_gnd(ag.const(both), [gt, gt]).item() == pytest.approx(loss_gnd_single(ag.const(perfect[None]), gt).item())
    mixed = np.vstack([perfect, np.full(T, 0.5)])
    assert loss_gnd(ag.const(mixed), [gt, gt]).item() == pytest.approx(math.log(2) / 2, abs=1e-6)
    with pytest.raises(ArityMismatch):
        loss_gnd(ag.const(np.zeros((0, T))), [])


def test_cons_cases():
    a = ag.const([[1.0, 3.0]])
    b = ag.const([[2.0, 1.0]])
    assert loss_cons(a, a).item() == 0.0
    assert loss_cons(a, b).item() == 1.5
    assert loss_cons(b, a).item() == 1.5
    with pytest.raises(ArityMismatch):
        loss_cons(a, ag.const([[1.0, 2.0], [3.0, 4.0]]))


def test_total_sums():
    z = ag.const([[0.0]])
    assert loss_total(z, z, z).total == 0.0
    bd = loss_total(ag.const([[1.0]]), ag.const([[0.5]]), ag.const([[0.25]]))
    assert bd.total == 1.75 and bd.node.item() == 1.75
    assert loss_total(ag.const([[1.0]])).as_dict() == {"sft": 1.0, "gnd": 0.0, "cons": 0.0, "total": 1.0}


def test_total_gradient_is_sum_of_components():
    rng = np.random.default_rng(0)
    store = ag.ParamStore()
    store.add("lp", rng.standard_normal((3, 5)))
    store.add("q", rng.standard_normal((2, 4)))
    store.add("f", rng.standard_normal((7, 4)))
    from evigrid.grounding import frame_similarities

    def loss(s):
        sft = loss_sft(ag.log_softmax(s["lp"]), [0, 2, 4])
        gnd = loss_gnd(frame_similarities(s["q"], s["f"]), [Interval(1, 2), Interval(4, 6)])
        cons = loss_cons(ag.take_rows(s["q"], [0]), ag.take_rows(s["q"], [1]))
        return loss_total(sft, gnd, cons).node

    assert ag.grad_check(loss, store) < 1e-4
