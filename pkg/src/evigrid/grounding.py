"""Evidence-token mechanics: projection, frame similarity, salient frames,
semantic aggregation and interval read-out."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autograd as ag
from .domain import Interval


class EmptySalientError(ValueError):
    pass


class IntervalOutOfRange(ValueError):
    pass


class IntervalMode(enum.Enum):
    RUN_OF_ARGMAX = "run_of_argmax"
    FULL_SPAN = "full_span"


@dataclass(frozen=True)
class GroundingConfig:
    salient_ratio: float = 0.6
    aggregation: str = "mean_pool_add"
    interval_mode: IntervalMode = IntervalMode.RUN_OF_ARGMAX

    def __post_init__(self):
        if not 0.0 < self.salient_ratio <= 1.0:
            raise ValueError(f"salient_ratio must be in (0, 1], got {self.salient_ratio}")
        if self.aggregation != "mean_pool_add":
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if isinstance(self.interval_mode, str):
            object.__setattr__(self, "interval_mode", IntervalMode(self.interval_mode))


@dataclass(frozen=True)
class SimilarityProfile:
    """Per-frame probabilities that a frame belongs to the evidence's event."""

    sims: np.ndarray
    source_slot: int = 0

    def __post_init__(self):
        s = np.array(self.sims, dtype=np.float64).reshape(-1)
        if s.size == 0:
            raise ValueError("empty similarity profile")
        if not ((s > 0.0) & (s < 1.0)).all():
            raise ValueError("similarities must lie strictly inside (0, 1)")
        s.setflags(write=False)
        object.__setattr__(self, "sims", s)

    @property
    def T(self) -> int:
        return self.sims.shape[0]


@dataclass(frozen=True)
class Train:
    gt: Interval


@dataclass(frozen=True)
class Infer:
    cfg: GroundingConfig = GroundingConfig()


def project_evidence(evi_hidden: ag.Node, w1: ag.Node, b1: ag.Node, w2: ag.Node, b2: ag.Node) -> ag.Node:
    """Two-layer perceptron C -> C (tanh) -> C applied row-wise."""
    return ag.add(ag.matmul(ag.tanh(ag.add(ag.matmul(evi_hidden, w1), b1)), w2), b2)


def frame_similarities(query: ag.Node, frames: ag.Node) -> ag.Node:
    """logistic(<query, frame_t> / sqrt(C)) for every frame; one row per query."""
    query, frames = ag.const(query), ag.const(frames)
    if query.shape[1] != frames.shape[1]:
        raise ag.ShapeError(f"query width {query.shape[1]} != frame width {frames.shape[1]}")
    scores = ag.matmul(query, ag.transpose(frames))
    return ag.logistic(ag.scale(scores, 1.0 / np.sqrt(frames.shape[1])))


def profile_of(sims: Union[ag.Node, np.ndarray], row: int = 0) -> SimilarityProfile:
    values = sims.value if isinstance(sims, ag.Node) else np.atleast_2d(sims)
    return SimilarityProfile(values[row], source_slot=row)


def select_salient(profile: SimilarityProfile, mode: Union[Train, Infer]) -> np.ndarray:
    """Sorted salient frame indices.

    Train mode returns exactly the ground-truth frames; Infer mode keeps frames
    whose similarity reaches ``salient_ratio`` times the maximum.
    """
    if isinstance(mode, Train):
        if not mode.gt.fits(profile.T):
            raise IntervalOutOfRange(f"{mode.gt} outside a {profile.T}-frame video")
        return np.arange(mode.gt.start, mode.gt.end + 1)
    s = profile.sims
    return np.flatnonzero(s >= mode.cfg.salient_ratio * s.max())


def pooling_row(salient, T: int) -> np.ndarray:
    """Row vector that averages the salient frames when multiplied into a T x C block."""
    salient = np.asarray(salient, dtype=np.intp)
    if salient.size == 0:
        raise EmptySalientError("no salient frames to aggregate")
    row = np.zeros((1, T))
    row[0, salient] = 1.0 / salient.size
    return row


def aggregate_semantics(evi: ag.Node, frames: ag.Node, salient) -> ag.Node:
    """evi + mean of the salient frame rows."""
    frames = ag.const(frames)
    pooled = ag.matmul(ag.const(pooling_row(salient, frames.shape[0])), frames)
    return ag.add(evi, pooled)


def intervals_from_salient(salient, profile: SimilarityProfile,
                           mode: IntervalMode = IntervalMode.RUN_OF_ARGMAX) -> Interval:
    salient = np.unique(np.asarray(salient, dtype=np.intp))
    if salient.size == 0:
        raise EmptySalientError("no salient frames")
    if mode is IntervalMode.FULL_SPAN:
        return Interval(int(salient[0]), int(salient[-1]))
    peak = int(np.argmax(profile.sims))
    members = set(salient.tolist())
    if peak not in members:
        # the peak always qualifies in Infer mode; otherwise anchor on the best salient frame
        peak = int(salient[np.argmax(profile.sims[salient])])
    lo = hi = peak
    while lo - 1 in members:
        lo -= 1
    while hi + 1 in members:
        hi += 1
    return Interval(lo, hi)


def ground(profile: SimilarityProfile, cfg: GroundingConfig = GroundingConfig()) -> tuple[np.ndarray, Interval]:
    """Infer-mode salient set and the interval it yields."""
    salient = select_salient(profile, Infer(cfg))
    return salient, intervals_from_salient(salient, profile, cfg.interval_mode)
