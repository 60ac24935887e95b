"""Preference-pair synthesis by controlled perturbation of a grounded response.

Exactly one factor is applied per pair. Temporal factors touch intervals (and
the event list); text factors touch event text only. Every pair carries a
record of what changed so ``validate_pair`` can check it.
"""

from __future__ import annotations

import json
import math
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .domain import (AnnotationSample, Factor, GroundedResponse, Interval, PerturbationRecord,
                     PreferencePair, Provenance, ResponseSequence, TEMPORAL_FACTORS, validate_pair)
from .model import GeneratorConfig, derive_seed

MAX_ATTEMPTS = 8


class InfeasibleFactor(ValueError):
    pass


class InfeasiblePerturbation(ValueError):
    pass


class DistorterError(RuntimeError):
    def __init__(self, message: str, status: int | None = None, body: bytes | None = None):
        super().__init__(message)
        self.status = status
        self.body = body


class SynthError(RuntimeError):
    pass


# command-line spellings of the factors
FACTOR_ALIASES = {
    "shift": Factor.TEMPORAL_SHIFT,
    "add": Factor.ADD_EVENT,
    "delete": Factor.DELETE_EVENT,
    "merge": Factor.MERGE_EVENTS,
    "distort": Factor.DISTORT_TEXT,
    "repeat": Factor.REPEAT_TEXT,
}


def parse_factor(name: str) -> Factor:
    key = name.strip()
    if key.lower() in FACTOR_ALIASES:
        return FACTOR_ALIASES[key.lower()]
    try:
        return Factor(key)
    except ValueError:
        raise ValueError(f"unknown factor {name!r}") from None


@dataclass(frozen=True)
class VocabInfo:
    concept_tokens: tuple[int, ...]
    names: dict[int, str] = field(default_factory=dict, compare=False)

    @classmethod
    def from_generator(cls, gcfg: GeneratorConfig) -> "VocabInfo":
        return cls(tuple(gcfg.concept_tokens()), gcfg.vocab_hint())


@dataclass(frozen=True)
class SynthConfig:
    factor_weights: tuple[tuple[Factor, float], ...] = tuple((f, 1 / 6) for f in Factor)
    shift_range: tuple[float, float] = (0.1, 0.4)
    max_events: int = 3
    distorter: str = "rule"  # "rule" or "remote"
    endpoint: str | None = None
    timeout: float = 10.0
    max_in_flight: int = 4
    seed: int = 0
    vocab: VocabInfo = VocabInfo.from_generator(GeneratorConfig())

    def __post_init__(self):
        w = self.factor_weights
        if isinstance(w, dict):
            w = tuple(w.items())
        w = tuple((parse_factor(f) if isinstance(f, str) else f, float(p)) for f, p in w)
        object.__setattr__(self, "factor_weights", w)
        if any(p < 0 for _, p in w) or not math.isclose(sum(p for _, p in w), 1.0, abs_tol=1e-9):
            raise ValueError("factor weights must be nonnegative and sum to 1")
        lo, hi = self.shift_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"shift range {self.shift_range} must lie in (0, 1]")
        if self.max_events < 1:
            raise ValueError("max_events must be >= 1")
        if self.distorter not in ("rule", "remote"):
            raise ValueError(f"unknown distorter {self.distorter!r}")
        if self.distorter == "remote" and not self.endpoint:
            raise ValueError("remote distorter needs an endpoint")

    def weight(self, factor: Factor) -> float:
        return sum(p for f, p in self.factor_weights if f is factor)


def normalized_weights(spec: dict[str, float]) -> dict[Factor, float]:
    """Weights for the named factors (others 0), rescaled to sum to 1."""
    out = {f: 0.0 for f in Factor}
    for name, p in spec.items():
        out[parse_factor(name)] += float(p)
    total = sum(out.values())
    if total <= 0:
        raise ValueError("factor weights sum to zero")
    return {f: p / total for f, p in out.items()}


# ------------------------------------------------------------------ selection

def _events(sample: AnnotationSample) -> list[tuple[Interval, tuple[int, ...]]]:
    return GroundedResponse(sample.response, sample.time_gt).events()


def _repeat_candidates(texts) -> list[int]:
    return [k for k in range(1, len(texts)) if texts[k] != texts[k - 1]]


def _distort_candidates(texts) -> list[int]:
    return [k for k, t in enumerate(texts) if t]


def feasible_factors(sample: AnnotationSample) -> list[Factor]:
    K = sample.K
    texts = [t for _, t in _events(sample)]
    out = []
    if K >= 1:
        out += [Factor.TEMPORAL_SHIFT, Factor.ADD_EVENT, Factor.DELETE_EVENT]
    if K >= 2:
        out.append(Factor.MERGE_EVENTS)
    if _distort_candidates(texts):
        out.append(Factor.DISTORT_TEXT)
    if K >= 2 and _repeat_candidates(texts):
        out.append(Factor.REPEAT_TEXT)
    return out


def choose_factor_and_events(sample: AnnotationSample, cfg: SynthConfig,
                             rng: np.random.Generator) -> tuple[Factor, tuple[int, ...]]:
    K = sample.K
    if K < 1:
        raise InfeasibleFactor(f"sample {sample.sample_id}: no events to perturb")
    feasible = feasible_factors(sample)
    factors = [f for f in Factor if f in feasible and cfg.weight(f) > 0]
    if not factors:
        raise InfeasibleFactor(f"sample {sample.sample_id}: no weighted factor is feasible for K={K}")
    p = np.array([cfg.weight(f) for f in factors])
    factor = factors[int(rng.choice(len(factors), p=p / p.sum()))]

    texts = [t for _, t in _events(sample)]
    if factor is Factor.MERGE_EVENTS:
        i = int(rng.integers(0, K - 1))
        return factor, (i, i + 1)
    if factor is Factor.REPEAT_TEXT:
        pool = _repeat_candidates(texts)
    elif factor is Factor.DISTORT_TEXT:
        pool = _distort_candidates(texts)
    else:
        pool = list(range(K))
    limit = min(len(pool), cfg.max_events)
    if factor is Factor.DELETE_EVENT and K >= 2:
        # deleting every event is only allowed when there is a single one
        limit = min(limit, K - 1)
    n = int(rng.integers(1, limit + 1))
    chosen = rng.choice(len(pool), size=n, replace=False)
    return factor, tuple(sorted(pool[int(i)] for i in chosen))


# ------------------------------------------------------------------ temporal perturbations

def shift_interval(iv: Interval, fraction: float, direction: int, T: int) -> Interval:
    """Translate by ceil(fraction * length) frames in ``direction``, clipped to the video."""
    offset = direction * math.ceil(fraction * iv.length)
    lo = min(max(iv.start + offset, 0), T - 1)
    hi = min(max(iv.end + offset, 0), T - 1)
    return Interval(lo, hi)


def _rebuild(sample: AnnotationSample, events, tail) -> GroundedResponse:
    with_refs = bool(sample.response.ref_indices())
    texts = [t for _, t in events]
    resp = ResponseSequence.from_events(texts, tail, with_refs=with_refs)
    return GroundedResponse(resp, tuple(iv for iv, _ in events))


def _free_placements(events, T: int, length: int) -> list[int]:
    starts = []
    for s in range(0, T - length + 1):
        cand = Interval(s, s + length - 1)
        if not any(cand.overlaps(iv) for iv, _ in events):
            starts.append(s)
    return starts


def perturb_temporal(sample: AnnotationSample, factor: Factor, events: Sequence[int], cfg: SynthConfig,
                     rng: np.random.Generator) -> tuple[GroundedResponse, list[PerturbationRecord]]:
    if factor not in TEMPORAL_FACTORS:
        raise ValueError(f"{factor} is not a temporal factor")
    T = sample.T
    ev = _events(sample)
    tail = sample.response.tail_text()
    if not ev or any(not 0 <= k < len(ev) for k in events) or not events:
        raise InfeasiblePerturbation(f"bad event selection {tuple(events)} for K={len(ev)}")
    records = []

    if factor is Factor.TEMPORAL_SHIFT:
        cur = list(ev)
        for k in events:
            iv, text = cur[k]
            frac = float(rng.uniform(*cfg.shift_range))
            first = 1 if rng.random() < 0.5 else -1
            for d in (first, -first):
                new = shift_interval(iv, frac, d, T)
                others = [o for j, (o, _) in enumerate(cur) if j != k]
                if new != iv and not any(new.overlaps(o) for o in others):
                    break
            else:
                raise InfeasiblePerturbation(f"event {k} cannot be shifted within T={T}")
            cur[k] = (new, text)
            records.append(PerturbationRecord(factor, (k,), (iv,), (new,)))
        cur.sort(key=lambda e: e[0].start)
        return _rebuild(sample, cur, tail), records

    if factor is Factor.ADD_EVENT:
        cur = list(ev)
        for k in events:
            src_iv, text = ev[k]
            for length in range(src_iv.length, 0, -1):
                starts = _free_placements(cur, T, length)
                if starts:
                    break
            else:
                raise InfeasiblePerturbation("no room to add an event")
            s = starts[int(rng.integers(0, len(starts)))]
            new = Interval(s, s + length - 1)
            cur.append((new, text))
            cur.sort(key=lambda e: e[0].start)
            records.append(PerturbationRecord(factor, (k,), (), (new,), (), (text,)))
        return _rebuild(sample, cur, tail), records

    if factor is Factor.DELETE_EVENT:
        if len(events) == len(ev) and len(ev) > 1:
            raise InfeasiblePerturbation("deleting every event")
        drop = set(events)
        for k in sorted(drop):
            iv, text = ev[k]
            records.append(PerturbationRecord(factor, (k,), (iv,), (), (text,), ()))
        cur = [e for j, e in enumerate(ev) if j not in drop]
        return _rebuild(sample, cur, tail), records

    # merge one adjacent pair
    if len(events) != 2 or events[1] != events[0] + 1:
        raise InfeasiblePerturbation(f"merge needs an adjacent pair, got {tuple(events)}")
    i, j = events
    (a, ta), (b, tb) = ev[i], ev[j]
    hull = Interval(min(a.start, b.start), max(a.end, b.end))
    merged = (hull, ta + tb)
    records.append(PerturbationRecord(factor, (i, j), (a, b), (hull,), (ta, tb), (ta + tb,)))
    cur = ev[:i] + [merged] + ev[j + 1:]
    return _rebuild(sample, cur, tail), records


# ------------------------------------------------------------------ text perturbations

Distorter = Callable[[tuple, np.random.Generator, VocabInfo], tuple]


def rule_based_distort(span: Sequence[int], rng: np.random.Generator, vocab: VocabInfo) -> tuple[int, ...]:
    """Replace a concept, swap two tokens or drop one; the result always differs."""
    span = tuple(int(t) for t in span)
    if not span:
        raise ValueError("cannot distort an empty span")
    concepts = vocab.concept_tokens
    concept_pos = [i for i, t in enumerate(span) if t in concepts]
    rules = []
    if concept_pos and len(concepts) >= 2:
        rules.append("replace")
    if len(span) >= 2 and len(set(span)) >= 2:
        rules.append("swap")
    if len(span) >= 2:
        rules.append("drop")
    if not rules:
        # a lone non-concept token: substitute a concept for it
        pool = [c for c in concepts if c != span[0]]
        if not pool:
            raise ValueError("vocabulary has no substitute token")
        return (pool[int(rng.integers(0, len(pool)))],)
    rule = rules[int(rng.integers(0, len(rules)))]
    out = list(span)
    if rule == "replace":
        i = concept_pos[int(rng.integers(0, len(concept_pos)))]
        pool = [c for c in concepts if c != out[i]]
        out[i] = pool[int(rng.integers(0, len(pool)))]
    elif rule == "swap":
        pairs = [(i, j) for i in range(len(out)) for j in range(i + 1, len(out)) if out[i] != out[j]]
        i, j = pairs[int(rng.integers(0, len(pairs)))]
        out[i], out[j] = out[j], out[i]
    else:
        del out[int(rng.integers(0, len(out)))]
    return tuple(out)


class RemoteDistorter:
    """POST ``{"tokens": [...], "vocab": {id: name}}`` and read ``{"tokens": [...]}`` back."""

    def __init__(self, endpoint: str, timeout: float = 10.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def __call__(self, span, rng, vocab: VocabInfo) -> tuple[int, ...]:
        span = [int(t) for t in span]
        body = json.dumps({"tokens": span, "vocab": {str(k): v for k, v in sorted(vocab.names.items())}})
        req = urllib.request.Request(self.endpoint, data=body.encode(), method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                status, payload = resp.status, resp.read()
        except urllib.error.HTTPError as exc:
            raise DistorterError(f"distorter returned HTTP {exc.code}", exc.code, exc.read()) from exc
        except (urllib.error.URLError, OSError) as exc:
            raise DistorterError(f"distorter unreachable: {exc}") from exc
        if status != 200:
            raise DistorterError(f"distorter returned HTTP {status}", status, payload)
        try:
            tokens = json.loads(payload)["tokens"]
            out = tuple(int(t) for t in tokens)
        except (ValueError, KeyError, TypeError) as exc:
            raise DistorterError(f"malformed distorter response: {exc}", status, payload) from exc
        if list(out) == span:
            raise DistorterError("distorter returned the input unchanged", status, payload)
        return out


def make_distorter(cfg: SynthConfig) -> Distorter:
    if cfg.distorter == "remote":
        return RemoteDistorter(cfg.endpoint, cfg.timeout)
    return rule_based_distort


def perturb_text(sample: AnnotationSample, factor: Factor, events: Sequence[int], distorter: Distorter,
                 rng: np.random.Generator, vocab: VocabInfo | None = None
                 ) -> tuple[GroundedResponse, list[PerturbationRecord]]:
    if factor in TEMPORAL_FACTORS:
        raise ValueError(f"{factor} is not a text factor")
    vocab = vocab or SynthConfig().vocab
    ev = _events(sample)
    if not events or any(not 0 <= k < len(ev) for k in events):
        raise InfeasiblePerturbation(f"bad event selection {tuple(events)} for K={len(ev)}")
    cur = list(ev)
    records = []
    for k in events:
        iv, text = ev[k]
        if factor is Factor.DISTORT_TEXT:
            if not text:
                raise InfeasiblePerturbation(f"event {k} has no text to distort")
            new = tuple(distorter(text, rng, vocab))
            if new == text:
                raise InfeasiblePerturbation("distorter returned the input unchanged")
        else:
            if k == 0 or ev[k - 1][1] == text:
                raise InfeasiblePerturbation(f"event {k} cannot repeat its predecessor")
            new = ev[k - 1][1]
        cur[k] = (iv, new)
        records.append(PerturbationRecord(factor, (k,), (), (), (text,), (new,)))
    return _rebuild(sample, cur, sample.response.tail_text()), records


# ------------------------------------------------------------------ pairs

def synthesize_pair(sample: AnnotationSample, cfg: SynthConfig, rng: np.random.Generator,
                    distorter: Distorter | None = None) -> PreferencePair:
    """Preferred = the sample itself; dispreferred = one controlled perturbation of it."""
    distorter = distorter or make_distorter(cfg)
    preferred = GroundedResponse(sample.response, sample.time_gt)
    last = None
    for _ in range(MAX_ATTEMPTS):
        factor, events = choose_factor_and_events(sample, cfg, rng)
        try:
            if factor in TEMPORAL_FACTORS:
                disp, records = perturb_temporal(sample, factor, events, cfg, rng)
            else:
                disp, records = perturb_text(sample, factor, events, distorter, rng, cfg.vocab)
        except InfeasiblePerturbation as exc:
            last = exc
            continue
        pair = PreferencePair(sample, preferred, disp, Provenance(factor, tuple(records)))
        problems = validate_pair(pair)
        if problems:
            raise SynthError(f"sample {sample.sample_id}: invalid pair: {'; '.join(map(str, problems))}")
        return pair
    raise InfeasiblePerturbation(f"sample {sample.sample_id}: no feasible perturbation after "
                                 f"{MAX_ATTEMPTS} attempts ({last})")


def sample_rng(cfg: SynthConfig, sample: AnnotationSample) -> np.random.Generator:
    """Per-sample generator derived from the global seed and the sample id."""
    return np.random.default_rng(derive_seed(cfg.seed, f"synth:{sample.sample_id}"))


def synthesize_for(sample: AnnotationSample, cfg: SynthConfig, distorter: Distorter | None = None) -> PreferencePair:
    return synthesize_pair(sample, cfg, sample_rng(cfg, sample), distorter)
