"""Supervised objective: token loss, frame-level grounding BCE and the
cross-stage evidence consistency term."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .domain import Interval
from .grounding import IntervalOutOfRange

BCE_EPS = 1e-7


class EmptyMaskError(ValueError):
    pass


class ArityMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    sft: float
    gnd: float
    cons: float
    total: float
    node: ag.Node | None = field(default=None, compare=False, repr=False)

    def as_dict(self) -> dict[str, float]:
        return {"sft": self.sft, "gnd": self.gnd, "cons": self.cons, "total": self.total}


def loss_sft(logprobs: ag.Node, targets, mask=None) -> ag.Node:
    """Mean negative log-likelihood of ``targets`` over masked rows."""
    logprobs = ag.const(logprobs)
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    n = logprobs.shape[0]
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if targets.shape[0] != n or mask.shape[0] != n:
        raise ArityMismatch(f"{n} rows, {targets.shape[0]} targets, {mask.shape[0]} mask entries")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise EmptyMaskError("no response positions to score")
    picked = ag.pick(ag.take_rows(logprobs, rows), targets[rows])
    return ag.scale(ag.reduce_mean(picked), -1.0)


def indicator(intervals: Sequence[Interval], T: int) -> np.ndarray:
    """One row per interval with 1 inside it and 0 elsewhere."""
    y = np.zeros((len(intervals), T))
    for k, iv in enumerate(intervals):
        if not iv.fits(T):
            raise IntervalOutOfRange(f"{iv} outside a {T}-frame video")
        y[k, iv.start : iv.end + 1] = 1.0
    return y


def loss_gnd_single(sims: ag.Node, gt: Interval, eps: float = BCE_EPS) -> ag.Node:
    """Frame-averaged binary cross-entropy of one similarity profile."""
    return loss_gnd(sims, [gt], eps)


def loss_gnd(sims: ag.Node, gts: Sequence[Interval], eps: float = BCE_EPS) -> ag.Node:
    """Mean frame-level BCE over all evidence profiles (one row per profile)."""
    sims = ag.const(sims)
    if len(gts) == 0 or sims.shape[0] != len(gts):
        raise ArityMismatch(f"{sims.shape[0]} profiles for {len(gts)} intervals")
    y = indicator(gts, sims.shape[1])
    ll = ag.bernoulli_loglik(sims, y, eps)
    return ag.scale(ag.reduce_mean(ll), -1.0 / sims.shape[1])


def loss_cons(stage1: ag.Node, stage2: ag.Node) -> ag.Node:
    """Mean absolute difference between paired stage-1 / stage-2 evidence features."""
    stage1, stage2 = ag.const(stage1), ag.const(stage2)
    if stage1.shape != stage2.shape or stage1.shape[0] == 0:
        raise ArityMismatch(f"stage features {stage1.shape} vs {stage2.shape}")
    return ag.reduce_mean(ag.absolute(ag.sub(stage1, stage2)))


def loss_total(sft: ag.Node, gnd: ag.Node | None = None, cons: ag.Node | None = None,
               weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> LossBreakdown:
    """Weighted sum of the three terms; absent terms count as zero.

    With unit weights ``total == sft + gnd + cons``.
    """
    terms = [(ag.const(sft), weights[0])]
    vals = [ag.const(sft).item()]
    for t, w in ((gnd, weights[1]), (cons, weights[2])):
        if t is None:
            vals.append(0.0)
            continue
        t = ag.const(t)
        vals.append(t.item())
        if w:
            terms.append((t, w))
    node = None
    for t, w in terms:
        term = t if w == 1.0 else ag.scale(t, w)
        node = term if node is None else ag.add(node, term)
    total = float(weights[0] * vals[0] + weights[1] * vals[1] + weights[2] * vals[2])
    return LossBreakdown(vals[0], vals[1], vals[2], node.item() if node is not None else total, node)
