import math

import numpy as np
import pytest

from evigrid import autograd as ag
from evigrid.domain import Interval, ResponseSequence
from evigrid.fpo import (FpoConfig, ResponseLogProb, fpo_loss, fpo_step, grounding_logprob, most_likely_interval,
                         pair_loss, response_logprob, score_response, with_reference)
from evigrid.grounding import IntervalOutOfRange, SimilarityProfile
from evigrid.losses import BCE_EPS, ArityMismatch
from evigrid.model import forward_teacher_forced, init_model, make_toy_sample
from evigrid.synth import SynthConfig, VocabInfo, synthesize_pair

from conftest import small_generator, small_model_config


def lp(total, text=None, gnd=0.0):
    text = total if text is None else text
    c = lambda v: ag.const([[v]])  # noqa: E731
    return ResponseLogProb(c(text), c(gnd), c(total))


def test_grounding_logprob_pinned():
    v = grounding_logprob(SimilarityProfile([0.1, 0.9, 0.8]), Interval(1, 2))
    assert v == pytest.approx(math.log(0.648), abs=1e-12)
    assert round(v, 4) == -0.4339


def test_grounding_logprob_uniform_and_perfect():
    T = 9
    assert grounding_logprob(np.full(T, 0.5), Interval(3, 4)) == pytest.approx(T * math.log(0.5), abs=1e-12)
    s = np.full(T, BCE_EPS)
    s[2:5] = 1 - BCE_EPS
    assert grounding_logprob(s, Interval(2, 4)) > -1e-5 * T
    with pytest.raises(IntervalOutOfRange):
        grounding_logprob(s, Interval(2, 9))


def test_most_likely_interval_bimodal():
    s = np.array([0.1, 0.2, 0.8, 0.9, 0.7, 0.3])
    iv, _ = most_likely_interval(s)
    assert iv == Interval(2, 4)


def test_fpo_loss_pins():
    assert fpo_loss(lp(-3.0), lp(-3.0)).item() == pytest.approx(math.log(2), abs=1e-12)
    two = fpo_loss(lp(0.0), lp(-2.0)).item()
    one = fpo_loss(lp(0.0), lp(-1.0)).item()
    assert two == pytest.approx(-math.log(1 / (1 + math.exp(-2))), abs=1e-12)
    assert round(two, 4) == 0.1269 and round(one, 4) == 0.3133
    assert two < one


def test_fpo_loss_reference_and_beta():
    # reference margins cancel the policy margin exactly
    assert fpo_loss(lp(-1.0), lp(-3.0), ref_pref=-1.0, ref_dispref=-3.0).item() == pytest.approx(math.log(2))
    a = fpo_loss(lp(0.0), lp(-2.0), FpoConfig(beta=0.5)).item()
    assert a == pytest.approx(fpo_loss(lp(0.0), lp(-1.0)).item())
    with pytest.raises(ValueError):
        FpoConfig(beta=0.0)
    with pytest.raises(ValueError):
        FpoConfig(use_reference=True)


def test_fpo_loss_large_margins_are_finite():
    assert math.isfinite(fpo_loss(lp(0.0), lp(-50.0)).item())
    assert fpo_loss(lp(-50.0), lp(0.0)).item() == pytest.approx(50.0, rel=1e-12)


def _pair(seed=0):
    cfg = small_model_config()
    gcfg = small_generator(cfg)
    sample = make_toy_sample(gcfg, seed, f"p{seed}")
    pair = synthesize_pair(sample, SynthConfig(vocab=VocabInfo.from_generator(gcfg)), np.random.default_rng(seed))
    return cfg, pair


def test_response_logprob_factorization():
    cfg, pair = _pair()
    store = init_model(cfg, 0)
    res, trace = score_response(store, cfg, pair.base.video.frames, pair.base.question, pair.preferred)
    t, g, tot = res.values()
    assert t == pytest.approx(float(trace.token_logprobs.value.sum()))
    assert tot == pytest.approx(t + g)
    # grounding term is the sum of per-profile log p_g
    expected = sum(grounding_logprob(p, iv) for p, iv in zip(trace.profiles(), trace.evidence_intervals))
    assert g == pytest.approx(expected, abs=1e-9)


def test_response_logprob_without_evidence():
    cfg = small_model_config()
    store = init_model(cfg, 0)
    frames = np.random.default_rng(0).standard_normal((6, cfg.feat_dim))
    resp = ResponseSequence.from_events([])
    resp = ResponseSequence((), (), )
    trace = forward_teacher_forced(store, cfg, frames, (4,), resp, ())
    res = response_logprob(trace)
    assert res.grounding_term.item() == 0.0 and res.total.item() == res.text_term.item()
    with pytest.raises(ArityMismatch):
        response_logprob(trace, intervals=[Interval(0, 1)])


def test_response_logprob_pinned_sum():
    # text term ln 0.5 plus the hand-computed grounding term
    total = math.log(0.5) + grounding_logprob(SimilarityProfile([0.1, 0.9, 0.8]), Interval(1, 2))
    assert round(total, 4) == -1.1270


def test_frozen_parameters_keep_margin():
    cfg, pair = _pair(1)
    store = init_model(cfg, 0)
    before = pair_loss(store, cfg, pair).margin
    fpo_step(store, cfg, [pair], FpoConfig(lr=0.0))
    assert pair_loss(store, cfg, pair).margin == before


def test_fpo_steps_increase_margin():
    cfg, pair = _pair(2)
    store = init_model(cfg, 0)
    fcfg = FpoConfig(lr=1e-3)
    margins = [pair_loss(store, cfg, pair).margin]
    for _ in range(50):
        fpo_step(store, cfg, [pair], fcfg)
        margins.append(pair_loss(store, cfg, pair).margin)
    ups = sum(b > a for a, b in zip(margins, margins[1:]))
    assert ups >= 0.9 * 50
    assert pair_loss(store, cfg, pair).loss.item() < math.log(2)


def test_fpo_grad_check():
    cfg, pair = _pair(3)
    store = init_model(cfg, 0)
    assert ag.grad_check(lambda s: pair_loss(s, cfg, pair).loss, store) < 1e-4
    ref = with_reference(FpoConfig(), store)
    assert ag.grad_check(lambda s: pair_loss(s, cfg, pair, ref).loss, store) < 1e-4
