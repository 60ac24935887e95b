"""Factorized preference optimization.

A grounded response's log-probability is the sum of its token log-probs
(text, evidence tokens, separator, EOS) and, for every evidence token of both
stages, the Bernoulli log-likelihood of its claimed interval under the frame
similarity profile.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from . import autograd as ag
from .domain import GroundedResponse, Interval, PreferencePair, ResponseSequence
from .grounding import IntervalOutOfRange, SimilarityProfile
from .losses import BCE_EPS, ArityMismatch, indicator
from .model import ForwardTrace, ModelConfig, forward_teacher_forced, sample_frames, trace_loss


@dataclass(frozen=True)
class FpoConfig:
    beta: float = 1.0
    use_reference: bool = False
    reference_params: ag.ParamStore | None = field(default=None, compare=False, repr=False)
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 8
    seed: int = 0
    eps: float = BCE_EPS
    # weight of the supervised loss on the preferred response (0 = separate phase)
    sft_weight: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.use_reference != (self.reference_params is not None):
            raise ValueError("reference_params must be given exactly when use_reference is set")
        if self.sft_weight < 0:
            raise ValueError("sft_weight must be >= 0")


@dataclass
class ResponseLogProb:
    text_term: ag.Node
    grounding_term: ag.Node
    total: ag.Node

    def values(self) -> tuple[float, float, float]:
        return self.text_term.item(), self.grounding_term.item(), self.total.item()


def grounding_logprob(profile, interval: Interval, eps: float = BCE_EPS) -> float:
    """ln p_g of one interval under one similarity profile (plain floats)."""
    s = profile.sims if isinstance(profile, SimilarityProfile) else np.asarray(profile, dtype=float).reshape(-1)
    if not interval.fits(s.shape[0]):
        raise IntervalOutOfRange(f"{interval} outside a {s.shape[0]}-frame video")
    y = indicator([interval], s.shape[0])
    ll, _ = _kernels.bernoulli_loglik(s.reshape(1, -1), y, eps)
    return float(ll[0])


def most_likely_interval(profile, eps: float = BCE_EPS) -> tuple[Interval, float]:
    """Interval maximizing ln p_g, with its value."""
    s = profile.sims if isinstance(profile, SimilarityProfile) else np.asarray(profile, dtype=float).reshape(-1)
    start, end, ll = _kernels.best_interval(s, eps)
    return Interval(int(start), int(end)), float(ll)


def response_logprob(trace: ForwardTrace, response: ResponseSequence | None = None,
                     intervals=None, eps: float = BCE_EPS) -> ResponseLogProb:
    """Factorized log-probability of the teacher-forced response in ``trace``.

    ``intervals`` default to the ones the trace was conditioned on; when given
    they must match the trace's evidence slots.
    """
    if response is not None and len(trace.evidence_stages) != response.K + len(response.ref_indices()):
        raise ArityMismatch("trace was not produced on this response")
    text = ag.reduce_sum(trace.token_logprobs)
    if trace.sims is None:
        if intervals:
            raise ArityMismatch(f"{len(intervals)} intervals for a response without evidence")
        return ResponseLogProb(text, ag.const(np.zeros((1, 1))), text)
    if intervals is None:
        rows = trace.evidence_intervals
    else:
        intervals = list(intervals)
        if len(intervals) != trace.n_stage1:
            raise ArityMismatch(f"{len(intervals)} intervals for {trace.n_stage1} evidence slots")
        rows = [intervals[k] for k in trace.evidence_slots]
    y = indicator(rows, trace.sims.shape[1])
    gnd = ag.reduce_sum(ag.bernoulli_loglik(trace.sims, y, eps))
    return ResponseLogProb(text, gnd, ag.add(text, gnd))


def score_response(store, cfg: ModelConfig, frames, question, grounded: GroundedResponse,
                   eps: float = BCE_EPS) -> tuple[ResponseLogProb, ForwardTrace]:
    trace = forward_teacher_forced(store, cfg, frames, question, grounded.response, grounded.intervals)
    return response_logprob(trace, eps=eps), trace


def fpo_loss(pref: ResponseLogProb, dispref: ResponseLogProb, cfg: FpoConfig = FpoConfig(),
             ref_pref: float = 0.0, ref_dispref: float = 0.0) -> ag.Node:
    """-ln sigmoid(beta * ((pref - ref_pref) - (dispref - ref_dispref)))."""
    diff = ag.sub(pref.total, dispref.total)
    shift = ref_pref - ref_dispref
    if shift:
        diff = ag.sub(diff, ag.const(np.full((1, 1), shift)))
    # -ln sigmoid(z) == softplus(-z)
    return ag.softplus(ag.scale(diff, -cfg.beta))


@dataclass
class PairTerms:
    loss: ag.Node
    margin: float
    text_margin: float
    grounding_margin: float


def _pair_logprobs(store, cfg, pair: PreferencePair, eps):
    frames = sample_frames(pair.base)
    q = pair.base.question
    return (score_response(store, cfg, frames, q, pair.preferred, eps),
            score_response(store, cfg, frames, q, pair.dispreferred, eps))


def pair_loss(store, cfg: ModelConfig, pair: PreferencePair, fcfg: FpoConfig = FpoConfig()) -> PairTerms:
    """FPO loss of one pair; margins are measured against the reference when configured."""
    (lp_w, tr_w), (lp_l, _) = _pair_logprobs(store, cfg, pair, fcfg.eps)
    t_margin = lp_w.text_term.item() - lp_l.text_term.item()
    g_margin = lp_w.grounding_term.item() - lp_l.grounding_term.item()
    ref_w = ref_l = 0.0
    if fcfg.use_reference:
        with ag.no_grad():
            (rw, _), (rl, _) = _pair_logprobs(fcfg.reference_params, cfg, pair, fcfg.eps)
        ref_w, ref_l = rw.total.item(), rl.total.item()
        t_margin -= rw.text_term.item() - rl.text_term.item()
        g_margin -= rw.grounding_term.item() - rl.grounding_term.item()
    loss = fpo_loss(lp_w, lp_l, fcfg, ref_w, ref_l)
    if fcfg.sft_weight:
        loss = ag.add(loss, ag.scale(trace_loss(tr_w).node, fcfg.sft_weight))
    margin = (lp_w.total.item() - ref_w) - (lp_l.total.item() - ref_l)
    return PairTerms(loss, margin, t_margin, g_margin)


def fpo_step(store, cfg: ModelConfig, pairs, fcfg: FpoConfig = FpoConfig()) -> dict[str, float]:
    """One optimizer step on a mini-batch of pairs; returns batch means."""
    if not pairs:
        raise ValueError("empty batch")
    stats = {"fpo_loss": 0.0, "margin": 0.0, "text_margin": 0.0, "grounding_margin": 0.0}
    for pair in pairs:
        t = pair_loss(store, cfg, pair, fcfg)
        ag.backward(ag.scale(t.loss, 1.0 / len(pairs)))
        stats["fpo_loss"] += t.loss.item() / len(pairs)
        stats["margin"] += t.margin / len(pairs)
        stats["text_margin"] += t.text_margin / len(pairs)
        stats["grounding_margin"] += t.grounding_margin / len(pairs)
    ag.adam_step(store, fcfg.lr)
    return stats


def preference_accuracy(store, cfg, pairs, eps: float = BCE_EPS) -> float:
    """Fraction of pairs where the preferred response scores strictly higher."""
    wins = 0
    with ag.no_grad():
        for pair in pairs:
            (lw, _), (ll, _) = _pair_logprobs(store, cfg, pair, eps)
            wins += lw.total.item() > ll.total.item()
    return wins / len(pairs) if pairs else float("nan")


def with_reference(fcfg: FpoConfig, store: ag.ParamStore) -> FpoConfig:
    """Copy of ``fcfg`` using a frozen snapshot of ``store`` as the reference policy."""
    return replace(fcfg, use_reference=True, reference_params=store.frozen())


def train_fpo(store, cfg: ModelConfig, pairs, fcfg: FpoConfig = FpoConfig(), log=None,
              max_steps: int | None = None):
    """Epochs of shuffled mini-batch FPO; ``log`` receives one row dict per step."""
    rng = np.random.default_rng(fcfg.seed)
    rows = []
    step = 0
    for _ in range(fcfg.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), fcfg.batch_size):
            if max_steps is not None and step >= max_steps:
                return rows
            batch = [pairs[i] for i in order[start : start + fcfg.batch_size]]
            stats = fpo_step(store, cfg, batch, fcfg)
            step += 1
            row = {"step": step, **stats}
            rows.append(row)
            if log is not None:
                log(row)
    return rows

