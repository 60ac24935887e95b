"""A compact causal decoder with evidence tokens.

The input stream is ``[frames | BOS | question | response]``. Frames enter as
projected feature vectors in the same stream as token embeddings. A response
is a grounding stage (K evidence tokens then the stage separator) followed by
an answer that interleaves text with evidence references, then EOS.

An evidence token at stream position p is grounded from the final hidden state
at p - 1 (the state that emitted it). The pooled salient frame states are
added to the evidence token's embedding, so only later positions see them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import grounding as gr
from .domain import (AnnotationSample, EvidenceRef, EvidenceSlot, Interval, ResponseSequence,
                     Stage, TextSpan, VideoFeatures)
from .losses import LossBreakdown, loss_cons, loss_gnd, loss_sft, loss_total


class LengthExceeded(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    feat_dim: int = 32
    vocab: int = 64
    layers: int = 2
    heads: int = 2
    mlp_ratio: int = 4
    activation: str = "gelu"
    max_T: int = 32
    max_question_len: int = 8
    max_answer_len: int = 24
    k_max: int = 8
    bos: int = 0
    eos: int = 1
    evi: int = 2
    evi_end: int = 3
    # ablation switches
    aggregation: bool = True
    answer_refs: bool = True
    regrounding: bool = True

    def __post_init__(self):
        specials = (self.bos, self.eos, self.evi, self.evi_end)
        if len(set(specials)) != 4 or max(specials) >= self.vocab or min(specials) < 0:
            raise ConfigError("model.specials", "special ids must be distinct and < vocab")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError("model.activation", f"unknown activation {self.activation!r}")
        if self.d_model % self.heads:
            raise ConfigError("model.heads", f"d_model={self.d_model} not divisible by heads={self.heads}")
        for name in ("d_model", "feat_dim", "vocab", "layers", "heads", "max_T", "k_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}", "must be >= 1")

    @property
    def specials(self) -> frozenset[int]:
        return frozenset((self.bos, self.eos, self.evi, self.evi_end))

    @property
    def max_positions(self) -> int:
        return self.max_T + 1 + self.max_question_len + self.k_max + 1 + self.max_answer_len + 1


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalars created by :func:`init_model`.

    frame projection F*C + C, token table V*C, position table P*C, per block
    12*C^2 + 13*C (two norms, packed attention, output, 4x MLP), final norm 2C,
    head C*V + V, evidence projection 2*(C^2 + C).
    """
    C, F, V, P = cfg.d_model, cfg.feat_dim, cfg.vocab, cfg.max_positions
    hidden = cfg.mlp_ratio * C
    block = 4 * C + (3 * C * C + 3 * C) + (C * C + C) + (C * hidden + hidden) + (hidden * C + C)
    return F * C + C + V * C + P * C + cfg.layers * block + 2 * C + C * V + V + 2 * (C * C + C)


def init_model(cfg: ModelConfig, seed: int) -> ag.ParamStore:
    """Scaled-uniform weights in [-1/sqrt(C), 1/sqrt(C)]; zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    C, F, V = cfg.d_model, cfg.feat_dim, cfg.vocab
    hidden = cfg.mlp_ratio * C
    a = 1.0 / math.sqrt(C)
    store = ag.ParamStore()

    def w(name, shape):
        store.add(name, rng.uniform(-a, a, size=shape))

    def zeros(name, n):
        store.add(name, np.zeros((1, n)))

    def ones(name, n):
        store.add(name, np.ones((1, n)))

    w("frame_in.w", (F, C))
    zeros("frame_in.b", C)
    w("tok_emb", (V, C))
    w("pos_emb", (cfg.max_positions, C))
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        ones(p + "ln1.g", C)
        zeros(p + "ln1.b", C)
        w(p + "attn.w_qkv", (C, 3 * C))
        zeros(p + "attn.b_qkv", 3 * C)
        w(p + "attn.w_o", (C, C))
        zeros(p + "attn.b_o", C)
        ones(p + "ln2.g", C)
        zeros(p + "ln2.b", C)
        w(p + "mlp.w_in", (C, hidden))
        zeros(p + "mlp.b_in", hidden)
        w(p + "mlp.w_out", (hidden, C))
        zeros(p + "mlp.b_out", C)
    ones("ln_f.g", C)
    zeros("ln_f.b", C)
    w("head.w", (C, V))
    zeros("head.b", V)
    w("evi_proj.w1", (C, C))
    zeros("evi_proj.b1", C)
    w("evi_proj.w2", (C, C))
    zeros("evi_proj.b2", C)
    return store


# ------------------------------------------------------------------ core network

def _decoder(store: ag.ParamStore, cfg: ModelConfig, x: ag.Node) -> ag.Node:
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        h = ag.layer_norm(x, store[p + "ln1.g"], store[p + "ln1.b"])
        qkv = ag.add(ag.matmul(h, store[p + "attn.w_qkv"]), store[p + "attn.b_qkv"])
        att = ag.causal_attention(qkv, cfg.heads)
        x = ag.add(x, ag.add(ag.matmul(att, store[p + "attn.w_o"]), store[p + "attn.b_o"]))
        h = ag.layer_norm(x, store[p + "ln2.g"], store[p + "ln2.b"])
        h = ag.add(ag.matmul(h, store[p + "mlp.w_in"]), store[p + "mlp.b_in"])
        h = ag.gelu(h) if cfg.activation == "gelu" else ag.relu(h)
        x = ag.add(x, ag.add(ag.matmul(h, store[p + "mlp.w_out"]), store[p + "mlp.b_out"]))
    return ag.layer_norm(x, store["ln_f.g"], store["ln_f.b"])


def _frame_inputs(store, frames: np.ndarray) -> ag.Node:
    return ag.add(ag.matmul(ag.const(frames), store["frame_in.w"]), store["frame_in.b"])


def _positions(store, start: int, stop: int) -> ag.Node:
    return ag.slice_rows(store["pos_emb"], start, stop)


def frame_states(store, cfg: ModelConfig, frames: np.ndarray) -> ag.Node:
    """Decoder-processed frame states; by causality they equal the frame rows of any full pass."""
    T = frames.shape[0]
    x = ag.add(_frame_inputs(store, frames), _positions(store, 0, T))
    return _decoder(store, cfg, x)


def evidence_query(store, hidden: ag.Node) -> ag.Node:
    return gr.project_evidence(hidden, store["evi_proj.w1"], store["evi_proj.b1"],
                               store["evi_proj.w2"], store["evi_proj.b2"])


def _token_logprobs(store, hidden_rows: ag.Node) -> ag.Node:
    return ag.log_softmax(ag.add(ag.matmul(hidden_rows, store["head.w"]), store["head.b"]))


# ------------------------------------------------------------------ teacher forcing

def response_tokens(resp: ResponseSequence, cfg: ModelConfig) -> list[int]:
    toks = [cfg.evi] * resp.K + [cfg.evi_end]
    for part in resp.answer_parts:
        if isinstance(part, TextSpan):
            bad = [t for t in part.tokens if t in cfg.specials or t >= cfg.vocab]
            if bad:
                raise ValueError(f"text tokens {bad} collide with specials or exceed the vocabulary")
            toks.extend(part.tokens)
        else:
            toks.append(cfg.evi)
    toks.append(cfg.eos)
    return toks


def _check_lengths(cfg: ModelConfig, T: int, question, resp: ResponseSequence):
    if T > cfg.max_T:
        raise LengthExceeded(f"T={T} > max_T={cfg.max_T}")
    if len(question) > cfg.max_question_len:
        raise LengthExceeded(f"question length {len(question)} > {cfg.max_question_len}")
    if resp.K > cfg.k_max:
        raise LengthExceeded(f"K={resp.K} > k_max={cfg.k_max}")
    n_answer = sum(len(p.tokens) if isinstance(p, TextSpan) else 1 for p in resp.answer_parts)
    if n_answer > cfg.max_answer_len:
        raise LengthExceeded(f"answer length {n_answer} > {cfg.max_answer_len}")
    bad_q = [t for t in question if t in cfg.specials or t >= cfg.vocab]
    if bad_q:
        raise ValueError(f"question tokens {bad_q} collide with specials or exceed the vocabulary")


@dataclass
class ForwardTrace:
    """Everything one teacher-forced pass produces.

    Evidence rows are ordered stage-1 slots first, then stage-2 references.
    """

    logprobs: ag.Node
    token_logprobs: ag.Node
    targets: np.ndarray
    hidden: ag.Node
    frame_states: ag.Node
    sims: ag.Node | None
    evidence_features: ag.Node | None
    aggregated: ag.Node | None
    evidence_stages: list[Stage]
    evidence_slots: list[int]
    evidence_intervals: list[Interval]

    @property
    def n_stage1(self) -> int:
        return sum(s is Stage.GROUNDING for s in self.evidence_stages)

    def profiles(self) -> list[gr.SimilarityProfile]:
        if self.sims is None:
            return []
        return [gr.profile_of(self.sims, i) for i in range(self.sims.shape[0])]

    def stage_rows(self, stage: Stage) -> list[int]:
        return [i for i, s in enumerate(self.evidence_stages) if s is stage]


def forward_teacher_forced(store: ag.ParamStore, cfg: ModelConfig, frames: np.ndarray,
                           question: Sequence[int], response: ResponseSequence,
                           intervals: Sequence[Interval]) -> ForwardTrace:
    """Score ``response`` (with its claimed ``intervals``) under teacher forcing.

    Salient frames for every evidence token are the claimed interval.
    """
    frames = np.asarray(frames, dtype=np.float64)
    T = frames.shape[0]
    _check_lengths(cfg, T, question, response)
    if len(intervals) != response.K:
        raise ValueError(f"{len(intervals)} intervals for K={response.K}")
    for iv in intervals:
        if not iv.fits(T):
            raise gr.IntervalOutOfRange(f"{iv} outside a {T}-frame video")

    resp_toks = response_tokens(response, cfg)
    ids = [cfg.bos, *question, *resp_toks]
    L = len(ids)
    q_off = 1 + len(question)  # index in ids of the first response token

    # evidence rows: stage-1 slots then stage-2 references
    ev_pos, ev_stage, ev_slot = [], [], []
    for k in range(response.K):
        ev_pos.append(q_off + k)
        ev_stage.append(Stage.GROUNDING)
        ev_slot.append(k)
    pos = q_off + response.K + 1
    for part in response.answer_parts:
        if isinstance(part, TextSpan):
            pos += len(part.tokens)
        else:
            ev_pos.append(pos)
            ev_stage.append(Stage.ANSWER)
            ev_slot.append(part.index)
            pos += 1
    ev_iv = [intervals[k] for k in ev_slot]

    fs = frame_states(store, cfg, frames)
    emb = ag.take_rows(store["tok_emb"], ids)
    aggregated = None
    if ev_pos and cfg.aggregation:
        pool = np.zeros((L, T))
        for p, iv in zip(ev_pos, ev_iv):
            pool[p] = gr.pooling_row(np.arange(iv.start, iv.end + 1), T)
        pooled = ag.matmul(ag.const(pool), fs)
        emb = ag.add(emb, pooled)
        aggregated = ag.take_rows(emb, ev_pos)
    pos = ag.concat([_positions(store, 0, T), _positions(store, cfg.max_T, cfg.max_T + L)])
    x = ag.add(ag.concat([_frame_inputs(store, frames), emb]), pos)
    hidden = _decoder(store, cfg, x)

    # row T + i predicts ids[i + 1]
    pred_rows = np.arange(T + q_off - 1, T + L - 1)
    logprobs = _token_logprobs(store, ag.take_rows(hidden, pred_rows))
    targets = np.asarray(resp_toks, dtype=np.intp)
    token_lp = ag.pick(logprobs, targets)

    sims = feats = None
    if ev_pos:
        feats = ag.take_rows(hidden, [T + p - 1 for p in ev_pos])
        sims = gr.frame_similarities(evidence_query(store, feats), fs)
    return ForwardTrace(logprobs, token_lp, targets, hidden, fs, sims, feats, aggregated,
                        ev_stage, ev_slot, ev_iv)


def sample_frames(sample: AnnotationSample) -> np.ndarray:
    if not isinstance(sample.video, VideoFeatures):
        raise ValueError(f"sample {sample.sample_id}: video features are not loaded")
    return sample.video.frames


def forward_sample(store, cfg, sample: AnnotationSample) -> ForwardTrace:
    return forward_teacher_forced(store, cfg, sample_frames(sample), sample.question,
                                  sample.response, sample.time_gt)


@dataclass(frozen=True)
class LossWeights:
    sft: float = 1.0
    gnd: float = 1.0
    cons: float = 1.0

    def as_tuple(self):
        return (self.sft, self.gnd, self.cons)


def sample_loss(store, cfg, sample: AnnotationSample, weights: LossWeights = LossWeights()) -> LossBreakdown:
    trace = forward_sample(store, cfg, sample)
    return trace_loss(trace, weights)


def trace_loss(trace: ForwardTrace, weights: LossWeights = LossWeights()) -> LossBreakdown:
    sft = loss_sft(trace.logprobs, trace.targets)
    gnd = cons = None
    if trace.sims is not None:
        gnd = loss_gnd(trace.sims, trace.evidence_intervals)
        s1, s2 = trace.stage_rows(Stage.GROUNDING), trace.stage_rows(Stage.ANSWER)
        if s2:
            # pair every stage-2 reference with the stage-1 slot it points at
            idx1 = [s1[trace.evidence_slots[i]] for i in s2]
            cons = loss_cons(ag.take_rows(trace.evidence_features, idx1),
                             ag.take_rows(trace.evidence_features, s2))
    return loss_total(sft, gnd, cons, weights.as_tuple())


# ------------------------------------------------------------------ generation

@dataclass
class GenerationResult:
    response: ResponseSequence
    grounding_intervals: list[Interval]
    answer_intervals: list[Interval]
    truncated: bool = False
    regrounding_disagreements: int = 0
    n_refs: int = 0

    def intervals(self, source: str = "answer") -> list[Interval]:
        return self.answer_intervals if source == "answer" else self.grounding_intervals


def _salient_from(profile: gr.SimilarityProfile, gcfg: gr.GroundingConfig, lower: int):
    """Infer-mode salient set restricted to frames at or after ``lower``."""
    s = profile.sims
    allowed = np.arange(lower, s.shape[0])
    vals = s[lower:]
    salient = allowed[vals >= gcfg.salient_ratio * vals.max()]
    if gcfg.interval_mode is gr.IntervalMode.FULL_SPAN:
        return salient, Interval(int(salient[0]), int(salient[-1]))
    peak = lower + int(np.argmax(vals))
    members = set(salient.tolist())
    lo = hi = peak
    while lo - 1 in members:
        lo -= 1
    while hi + 1 in members:
        hi += 1
    return salient, Interval(lo, hi)


def generate(store: ag.ParamStore, cfg: ModelConfig, frames: np.ndarray, question: Sequence[int],
             gcfg: gr.GroundingConfig = gr.GroundingConfig()) -> GenerationResult:
    """Greedy two-stage decoding.

    Stage 1 may only emit evidence tokens or the separator; stage-1 slots are
    grounded on frames at or after the previous slot's start so they come out
    in temporal order. Stage 2 emits text and evidence references paired in
    order with the stage-1 slots, until EOS or ``max_answer_len``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    T = frames.shape[0]
    if T > cfg.max_T:
        raise LengthExceeded(f"T={T} > max_T={cfg.max_T}")
    if len(question) > cfg.max_question_len:
        raise LengthExceeded(f"question length {len(question)} > {cfg.max_question_len}")
    C = cfg.d_model
    with ag.no_grad():
        fs = frame_states(store, cfg, frames).value
        fin = _frame_inputs(store, frames).value
        tok = store["tok_emb"].value
        pos = store["pos_emb"].value
        head_w, head_b = store["head.w"].value, store["head.b"].value

        rows = [tok[cfg.bos]] + [tok[t] for t in question]
        slots: list[EvidenceSlot] = []
        slot_salient: list[np.ndarray] = []
        parts: list = []
        text: list[int] = []
        answer_len = 0
        n_refs = 0
        disagreements = 0
        truncated = False
        stage = 1

        def step():
            x = np.vstack([fin + pos[:T], np.array(rows) + pos[cfg.max_T : cfg.max_T + len(rows)]])
            h = _decoder(store, cfg, ag.Node(x)).value[-1]
            return h, (h @ head_w + head_b).reshape(-1)

        def ground_from(h, lower):
            q = evidence_query(store, ag.Node(h.reshape(1, C))).value
            sims = gr.frame_similarities(ag.Node(q), ag.Node(fs)).value
            prof = gr.SimilarityProfile(sims[0])
            return _salient_from(prof, gcfg, lower)

        def evidence_row(salient):
            row = tok[cfg.evi].copy()
            if cfg.aggregation:
                row = row + fs[salient].mean(axis=0)
            return row

        while True:
            h, logits = step()
            if stage == 1:
                if len(slots) >= cfg.k_max:
                    nxt = cfg.evi_end
                else:
                    nxt = cfg.evi if logits[cfg.evi] > logits[cfg.evi_end] else cfg.evi_end
                if nxt == cfg.evi:
                    lower = slots[-1].interval.start if slots else 0
                    salient, iv = ground_from(h, lower)
                    slots.append(EvidenceSlot(Stage.GROUNDING, iv, h.copy()))
                    slot_salient.append(salient)
                    rows.append(evidence_row(salient))
                else:
                    rows.append(tok[cfg.evi_end])
                    stage = 2
                continue

            if answer_len >= cfg.max_answer_len:
                truncated = True
                break
            masked = logits.copy()
            masked[[cfg.bos, cfg.evi_end]] = -np.inf
            if not cfg.answer_refs or n_refs >= len(slots):
                masked[cfg.evi] = -np.inf
            nxt = int(np.argmax(masked))
            if nxt == cfg.eos:
                break
            answer_len += 1
            if nxt == cfg.evi:
                k = n_refs
                n_refs += 1
                if text:
                    parts.append(TextSpan(tuple(text)))
                    text = []
                if cfg.regrounding:
                    salient, iv = ground_from(h, 0)
                    if iv != slots[k].interval:
                        disagreements += 1
                else:
                    salient, iv = slot_salient[k], slots[k].interval
                parts.append(EvidenceRef(k, EvidenceSlot(Stage.ANSWER, iv, h.copy())))
                rows.append(evidence_row(salient))
            else:
                text.append(nxt)
                rows.append(tok[nxt])
        if text:
            parts.append(TextSpan(tuple(text)))

    resp = ResponseSequence(tuple(slots), tuple(parts))
    stage1 = [s.interval for s in slots]
    final = list(stage1)
    for ref in resp.refs():
        final[ref.index] = ref.slot.interval
    return GenerationResult(resp, stage1, final, truncated, disagreements, n_refs)


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = LossWeights()


@dataclass
class TrainReport:
    epochs: list[dict[str, float]] = field(default_factory=list)
    steps: int = 0

    @property
    def initial_total(self) -> float:
        return self.epochs[0]["total"] if self.epochs else float("nan")

    @property
    def final_total(self) -> float:
        return self.epochs[-1]["total"] if self.epochs else float("nan")


class SampleError(ValueError):
    def __init__(self, sample_id, cause: Exception):
        super().__init__(f"sample {sample_id}: {cause}")
        self.sample_id = sample_id
        self.cause = cause


def _mean_breakdowns(items: list[LossBreakdown]) -> dict[str, float]:
    n = len(items)
    return {k: math.fsum(getattr(b, k) for b in items) / n for k in ("sft", "gnd", "cons", "total")}


def train(store: ag.ParamStore, cfg: ModelConfig, dataset: Sequence[AnnotationSample],
          tcfg: TrainConfig = TrainConfig(),
          on_epoch: Callable[[int, dict], None] | None = None) -> TrainReport:
    """Adam over per-sample losses, averaged within mini-batches.

    Per-epoch means are accumulated during the epoch (pre-update values).
    """
    if not dataset:
        raise ValueError("empty dataset")
    for s in dataset:
        if s.K < 1:
            raise SampleError(s.sample_id, ValueError("training needs at least one evidence token"))
    rng = np.random.default_rng(tcfg.seed)
    report = TrainReport()
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(dataset))
        seen: list[LossBreakdown] = []
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start : start + tcfg.batch_size]
            for i in batch:
                sample = dataset[i]
                try:
                    bd = sample_loss(store, cfg, sample, tcfg.weights)
                except (ValueError, FloatingPointError) as exc:
                    raise SampleError(sample.sample_id, exc) from exc
                ag.backward(ag.scale(bd.node, 1.0 / len(batch)))
                seen.append(bd)
            ag.adam_step(store, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
            report.steps += 1
        means = _mean_breakdowns(seen)
        report.epochs.append(means)
        if on_epoch is not None:
            on_epoch(epoch, means)
    return report


def evaluate_loss(store, cfg, dataset, weights: LossWeights = LossWeights()) -> dict[str, float]:
    with ag.no_grad():
        return _mean_breakdowns([sample_loss(store, cfg, s, weights) for s in dataset])


def strip_answer_refs(sample: AnnotationSample) -> AnnotationSample:
    """Pure-text answer variant (the evidence-referencing ablation)."""
    parts = [p for p in sample.response.answer_parts if isinstance(p, TextSpan)]
    resp = ResponseSequence(sample.response.grounding_slots, tuple(parts))
    return dataclasses.replace(sample, response=resp)


# ------------------------------------------------------------------ toy data

@dataclass(frozen=True)
class GeneratorConfig:
    T_min: int = 12
    T_max: int = 20
    feat_dim: int = 32
    n_concepts: int = 8
    events_min: int = 1
    events_max: int = 3
    event_len_min: int = 2
    event_len_max: int = 5
    distractors_max: int = 0
    noise: float = 0.1
    concept_seed: int = 0
    query_token: int = 4
    first_concept_token: int = 5
    question_order: str = "temporal"

    def validate(self, cfg: ModelConfig | None = None):
        if not 1 <= self.T_min <= self.T_max:
            raise ConfigError("data.T_min", "need 1 <= T_min <= T_max")
        if not 1 <= self.events_min <= self.events_max:
            raise ConfigError("data.events_min", "need 1 <= events_min <= events_max")
        if not 1 <= self.event_len_min <= self.event_len_max:
            raise ConfigError("data.event_len_min", "need 1 <= event_len_min <= event_len_max")
        if self.events_max + self.distractors_max > self.n_concepts:
            raise ConfigError("data.events_max", "more events than distinct concepts")
        if (self.events_max + self.distractors_max) * self.event_len_min > self.T_min:
            raise ConfigError("data.events_max", "events cannot fit in the shortest video")
        if self.noise < 0:
            raise ConfigError("data.noise", "must be >= 0")
        if self.question_order not in ("sorted", "temporal"):
            raise ConfigError("data.question_order", "must be 'sorted' or 'temporal'")
        if cfg is not None:
            if self.T_max > cfg.max_T:
                raise ConfigError("data.T_max", f"exceeds model max_T={cfg.max_T}")
            if self.feat_dim != cfg.feat_dim:
                raise ConfigError("data.feat_dim", f"must equal model feat_dim={cfg.feat_dim}")
            if self.first_concept_token + self.n_concepts > cfg.vocab:
                raise ConfigError("data.n_concepts", "concept tokens exceed the vocabulary")
            if self.query_token in cfg.specials:
                raise ConfigError("data.query_token", "collides with a special token")

    def concept_vectors(self) -> np.ndarray:
        rng = np.random.default_rng(self.concept_seed)
        v = rng.standard_normal((self.n_concepts, self.feat_dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def concept_token(self, c: int) -> int:
        return self.first_concept_token + c

    def concept_tokens(self) -> list[int]:
        return [self.concept_token(c) for c in range(self.n_concepts)]

    def vocab_hint(self) -> dict[int, str]:
        hint = {self.query_token: "find"}
        hint.update({self.concept_token(c): f"c{c}" for c in range(self.n_concepts)})
        return hint


def derive_seed(seed: int, key: str) -> int:
    """Order-independent per-item seed from a global seed and an item key."""
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _place_events(rng, T: int, lengths: list[int]) -> list[int]:
    """Random non-overlapping starts for events of the given lengths, in order."""
    slack = T - sum(lengths)
    # distribute the slack over len+1 gaps uniformly (stars and bars)
    cuts = np.sort(rng.integers(0, slack + 1, size=len(lengths)))
    starts, cursor = [], 0
    for i, n in enumerate(lengths):
        gap = cuts[i] - (cuts[i - 1] if i else 0)
        cursor += int(gap)
        starts.append(cursor)
        cursor += n
    return starts


def make_toy_sample(gcfg: GeneratorConfig, seed: int, sample_id: str | None = None,
                    concepts: np.ndarray | None = None) -> AnnotationSample:
    rng = np.random.default_rng(seed)
    concepts = gcfg.concept_vectors() if concepts is None else concepts
    T = int(rng.integers(gcfg.T_min, gcfg.T_max + 1))
    n_events = int(rng.integers(gcfg.events_min, gcfg.events_max + 1))
    n_distract = int(rng.integers(0, gcfg.distractors_max + 1))
    total = n_events + n_distract
    while total * gcfg.event_len_min > T:
        n_distract -= 1
        total -= 1
    lengths = [int(rng.integers(gcfg.event_len_min, gcfg.event_len_max + 1)) for _ in range(total)]
    while sum(lengths) > T:
        j = int(np.argmax(lengths))
        lengths[j] -= 1
    starts = _place_events(rng, T, lengths)
    ids = rng.choice(gcfg.n_concepts, size=total, replace=False)
    queried = set(rng.choice(total, size=n_events, replace=False).tolist())

    frames = rng.standard_normal((T, gcfg.feat_dim)) * gcfg.noise
    events = []
    for j, (s, n) in enumerate(zip(starts, lengths)):
        frames[s : s + n] += concepts[ids[j]]
        if j in queried:
            events.append((Interval(s, s + n - 1), int(ids[j])))
    frames = frames.astype(np.float32).astype(np.float64)

    if gcfg.question_order == "sorted":
        q_concepts = sorted(c for _, c in events)
    else:
        q_concepts = [c for _, c in events]
    question = (gcfg.query_token, *(gcfg.concept_token(c) for c in q_concepts))
    texts = [(gcfg.concept_token(c),) for _, c in events]
    response = ResponseSequence.from_events(texts)
    return AnnotationSample(VideoFeatures(frames), question, response,
                            tuple(iv for iv, _ in events), gcfg.vocab_hint(), sample_id)


def make_toy_dataset(n: int, gcfg: GeneratorConfig, seed: int, prefix: str = "s") -> list[AnnotationSample]:
    """``n`` samples; sample i depends only on (seed, its id)."""
    gcfg.validate()
    concepts = gcfg.concept_vectors()
    width = max(4, len(str(max(n - 1, 0))))
    out = []
    for i in range(n):
        sid = f"{prefix}{i:0{width}d}"
        out.append(make_toy_sample(gcfg, derive_seed(seed, sid), sid, concepts))
    return out
