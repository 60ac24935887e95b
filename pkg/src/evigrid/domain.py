"""Core value types, the annotation file schema and preference-pair checks.

Intervals are inclusive frame-index pairs. Videos are sampled at 1 FPS by
convention, so a frame index is also a time in seconds.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np


class SchemaError(ValueError):
    """The document does not follow the annotation schema."""


class InvariantError(ValueError):
    """The document parses but violates a semantic invariant."""


@dataclass(frozen=True, order=True)
class Interval:
    start: int
    end: int

    def __post_init__(self):
        if not all(isinstance(x, (int, np.integer)) and not isinstance(x, bool) for x in (self.start, self.end)):
            raise InvariantError(f"interval bounds must be integers: {self.start!r}, {self.end!r}")
        object.__setattr__(self, "start", int(self.start))
        object.__setattr__(self, "end", int(self.end))
        if not 0 <= self.start <= self.end:
            raise InvariantError(f"invalid interval [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def frames(self) -> range:
        return range(self.start, self.end + 1)

    def fits(self, T: int) -> bool:
        return self.end < T

    def overlaps(self, other: "Interval") -> bool:
        return self.start <= other.end and other.start <= self.end

    def to_list(self) -> list[int]:
        return [self.start, self.end]

    def __repr__(self):
        return f"[{self.start},{self.end}]"


class Stage(enum.Enum):
    GROUNDING = "grounding"
    ANSWER = "answer"


@dataclass(frozen=True, eq=False)
class VideoFeatures:
    """A T x C matrix of per-frame feature vectors."""

    frames: np.ndarray
    fps: float = 1.0

    def __post_init__(self):
        arr = np.array(self.frames, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvariantError(f"video features must be a non-empty T x C matrix, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvariantError("video features contain non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def C(self) -> int:
        return self.frames.shape[1]

    def __eq__(self, other):
        return (isinstance(other, VideoFeatures) and self.fps == other.fps
                and np.array_equal(self.frames, other.frames))

    __hash__ = None


@dataclass(frozen=True)
class VideoRef:
    """A reference to a feature file on disk (resolved relative to the annotation)."""

    path: str
    T: int
    C: int
    fps: float = 1.0

    def load(self, base_dir: Union[str, Path, None] = None) -> VideoFeatures:
        p = Path(self.path)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        video = read_feature_file(p, fps=self.fps)
        if (video.T, video.C) != (self.T, self.C):
            raise InvariantError(f"{p}: header {video.T}x{video.C} != reference {self.T}x{self.C}")
        return video


@dataclass(frozen=True, eq=False)
class EvidenceSlot:
    stage: Stage
    interval: Interval | None = None
    feature: np.ndarray | None = None

    def __post_init__(self):
        if self.feature is not None:
            f = np.array(self.feature, dtype=np.float64).reshape(-1)
            if not np.isfinite(f).all():
                raise InvariantError("evidence feature contains non-finite values")
            f.setflags(write=False)
            object.__setattr__(self, "feature", f)

    def __eq__(self, other):
        if not isinstance(other, EvidenceSlot):
            return NotImplemented
        if (self.stage, self.interval) != (other.stage, other.interval):
            return False
        if self.feature is None or other.feature is None:
            return self.feature is None and other.feature is None
        return np.array_equal(self.feature, other.feature)

    __hash__ = None


@dataclass(frozen=True)
class TextSpan:
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))


@dataclass(frozen=True)
class EvidenceRef:
    index: int
    slot: EvidenceSlot | None = field(default=None, compare=False)


Part = Union[TextSpan, EvidenceRef]


@dataclass(frozen=True)
class ResponseSequence:
    """K grounding-stage evidence slots, then interleaved text and references."""

    grounding_slots: tuple[EvidenceSlot, ...]
    answer_parts: tuple[Part, ...]

    def __post_init__(self):
        object.__setattr__(self, "grounding_slots", tuple(self.grounding_slots))
        object.__setattr__(self, "answer_parts", tuple(self.answer_parts))
        K = len(self.grounding_slots)
        refs = self.ref_indices()
        if any(r < 0 or r >= K for r in refs):
            raise InvariantError(f"evidence reference out of range 0..{K - 1}: {refs}")
        if any(b <= a for a, b in zip(refs, refs[1:])):
            raise InvariantError(f"evidence references must be unique and increasing: {refs}")
        starts = [s.interval.start for s in self.grounding_slots if s.interval is not None]
        if any(b < a for a, b in zip(starts, starts[1:])):
            raise InvariantError("grounding slots are not in temporal order")

    @property
    def K(self) -> int:
        return len(self.grounding_slots)

    def ref_indices(self) -> list[int]:
        return [p.index for p in self.answer_parts if isinstance(p, EvidenceRef)]

    def refs(self) -> list[EvidenceRef]:
        return [p for p in self.answer_parts if isinstance(p, EvidenceRef)]

    def text_tokens(self) -> list[int]:
        return [t for p in self.answer_parts if isinstance(p, TextSpan) for t in p.tokens]

    def event_texts(self) -> list[tuple[int, ...]]:
        """Text attached to each referenced event: the tokens since the previous reference."""
        out, cur = [], []
        for p in self.answer_parts:
            if isinstance(p, TextSpan):
                cur.extend(p.tokens)
            else:
                out.append(tuple(cur))
                cur = []
        return out

    def tail_text(self) -> tuple[int, ...]:
        cur: list[int] = []
        for p in self.answer_parts:
            cur = cur + list(p.tokens) if isinstance(p, TextSpan) else []
        return tuple(cur)

    def structure(self) -> tuple:
        """Hashable content without run-time features or intervals."""
        parts = tuple(("t", p.tokens) if isinstance(p, TextSpan) else ("e", p.index)
                      for p in self.answer_parts)
        return (self.K, parts)

    @classmethod
    def from_events(cls, texts, tail=(), with_refs: bool = True) -> "ResponseSequence":
        """Build the canonical layout ``text_k <evi>`` for every event, plus tail text."""
        slots = tuple(EvidenceSlot(Stage.GROUNDING) for _ in texts)
        parts: list[Part] = []
        for k, text in enumerate(texts):
            if text:
                parts.append(TextSpan(tuple(text)))
            if with_refs:
                parts.append(EvidenceRef(k))
        if tail:
            parts.append(TextSpan(tuple(tail)))
        return cls(slots, tuple(_merge_text(parts)))


def _merge_text(parts):
    out: list[Part] = []
    for p in parts:
        if isinstance(p, TextSpan) and out and isinstance(out[-1], TextSpan):
            out[-1] = TextSpan(out[-1].tokens + p.tokens)
        elif isinstance(p, TextSpan) and not p.tokens:
            continue
        else:
            out.append(p)
    return out


@dataclass(frozen=True)
class AnnotationSample:
    video: Union[VideoFeatures, VideoRef]
    question: tuple[int, ...]
    response: ResponseSequence
    time_gt: tuple[Interval, ...]
    vocab_hint: tuple[tuple[int, str], ...] | None = None
    sample_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "question", tuple(int(t) for t in self.question))
        object.__setattr__(self, "time_gt", tuple(self.time_gt))
        if isinstance(self.vocab_hint, dict):
            object.__setattr__(self, "vocab_hint", tuple(sorted((int(k), str(v)) for k, v in self.vocab_hint.items())))
        K = self.response.K
        if len(self.time_gt) != K:
            raise InvariantError(f"time_gt has {len(self.time_gt)} entries but the response has K={K}")
        n_refs = len(self.response.ref_indices())
        if n_refs not in (0, K):
            raise InvariantError(f"answer references {n_refs} events but time_gt has {K}")
        for iv in self.time_gt:
            if not iv.fits(self.T):
                raise InvariantError(f"interval {iv} out of range for T={self.T}")
        if any(b.start < a.start for a, b in zip(self.time_gt, self.time_gt[1:])):
            raise InvariantError("time_gt is not in temporal order")

    @property
    def K(self) -> int:
        return self.response.K

    @property
    def T(self) -> int:
        return self.video.T

    def features(self, base_dir=None) -> VideoFeatures:
        return self.video if isinstance(self.video, VideoFeatures) else self.video.load(base_dir)


# ------------------------------------------------------------------ feature files

_HEADER = struct.Struct("<II")


def write_feature_file(path, video: Union[VideoFeatures, np.ndarray]) -> None:
    arr = video.frames if isinstance(video, VideoFeatures) else np.asarray(video)
    T, C = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(T, C))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_feature_file(path, fps: float = 1.0) -> VideoFeatures:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SchemaError(f"{path}: truncated feature header")
    T, C = _HEADER.unpack_from(data)
    if len(data) != _HEADER.size + 4 * T * C:
        raise SchemaError(f"{path}: expected {T}x{C} float32 values")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(T, C)
    return VideoFeatures(arr.astype(np.float64), fps=fps)


# ------------------------------------------------------------------ annotation JSON

def _require(obj, key, kind, where="document"):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where} must be an object")
    if key not in obj:
        raise SchemaError(f"{where}: missing key {key!r}")
    val = obj[key]
    if kind is int:
        ok = isinstance(val, int) and not isinstance(val, bool)
    else:
        ok = isinstance(val, kind)
    if not ok:
        raise SchemaError(f"{where}: {key!r} must be {getattr(kind, '__name__', kind)}")
    return val


def _int_list(val, where) -> tuple[int, ...]:
    if not isinstance(val, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in val):
        raise SchemaError(f"{where} must be an array of integers")
    if any(t < 0 for t in val):
        raise SchemaError(f"{where}: token ids must be non-negative")
    return tuple(val)


def _number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _frame_index(x, fps: float, where) -> int:
    if not _number(x) or not math.isfinite(x):
        raise SchemaError(f"{where}: interval bound must be a number")
    if isinstance(x, int):
        return x
    return int(math.floor(x * fps + 0.5))


def _parse_video(val):
    if isinstance(val, dict) and "path" in val:
        path = _require(val, "path", str, "video")
        T = _require(val, "T", int, "video")
        C = _require(val, "C", int, "video")
        fps = val.get("fps", 1.0)
        if not _number(fps) or fps <= 0:
            raise SchemaError("video: fps must be a positive number")
        if T < 1 or C < 1:
            raise InvariantError("video: T and C must be >= 1")
        return VideoRef(path, T, C, float(fps))
    fps = 1.0
    if isinstance(val, dict):
        T = _require(val, "T", int, "video")
        C = _require(val, "C", int, "video")
        data = _require(val, "data", list, "video")
        fps = val.get("fps", 1.0)
        if not _number(fps) or fps <= 0:
            raise SchemaError("video: fps must be a positive number")
        if len(data) != T * C or not all(_number(x) for x in data):
            raise SchemaError(f"video: data must hold T*C={T * C} numbers")
        try:
            rows = np.array(data, dtype=np.float64).reshape(T, C) if T * C else np.zeros((T, C))
        except OverflowError as exc:
            raise SchemaError(f"video: {exc}") from exc
    elif isinstance(val, list):
        if not val or not all(isinstance(r, list) for r in val):
            raise SchemaError("video: inline frames must be a non-empty array of rows")
        width = len(val[0])
        if any(len(r) != width for r in val) or not all(_number(x) for r in val for x in r):
            raise SchemaError("video: rows must be equal-length numeric arrays")
        try:
            rows = np.array(val, dtype=np.float64)
        except OverflowError as exc:
            raise SchemaError(f"video: {exc}") from exc
    else:
        raise SchemaError("video must be a feature-file reference or inline frames")
    try:
        return VideoFeatures(rows, fps=float(fps))
    except InvariantError:
        raise
    except (ValueError, TypeError, OverflowError) as exc:
        raise SchemaError(f"video: {exc}") from exc


def _parse_response(val, expected_k: int | None = None) -> ResponseSequence:
    k = _require(val, "grounding_k", int, "response")
    if k < 0:
        raise SchemaError("response: grounding_k must be >= 0")
    if expected_k is not None and k != expected_k:
        raise InvariantError(f"response has K={k} but time_gt has {expected_k} entries")
    answer = _require(val, "answer", list, "response")
    parts: list[Part] = []
    for i, part in enumerate(answer):
        where = f"response.answer[{i}]"
        if not isinstance(part, dict) or len(part) != 1:
            raise SchemaError(f"{where} must be an object with exactly one key")
        if "text" in part:
            parts.append(TextSpan(_int_list(part["text"], where + ".text")))
        elif "evi" in part:
            idx = part["evi"]
            if not isinstance(idx, int) or isinstance(idx, bool):
                raise SchemaError(f"{where}.evi must be an integer")
            parts.append(EvidenceRef(idx, EvidenceSlot(Stage.ANSWER)))
        else:
            raise SchemaError(f"{where}: unknown part {sorted(part)}")
    slots = tuple(EvidenceSlot(Stage.GROUNDING) for _ in range(k))
    return ResponseSequence(slots, tuple(parts))


def from_document(doc) -> AnnotationSample:
    """Build a validated sample from an already-decoded JSON object."""
    if not isinstance(doc, dict):
        raise SchemaError("document must be a JSON object")
    known = {"video", "question", "response", "time_gt", "vocab_hint", "id"}
    unknown = set(doc) - known
    if unknown:
        raise SchemaError(f"unknown keys: {sorted(unknown)}")
    if "video" not in doc:
        raise SchemaError("missing key 'video'")
    video = _parse_video(doc["video"])
    question = _int_list(_require(doc, "question", list), "question")
    raw_gt = _require(doc, "time_gt", list)
    gts = []
    for i, pair in enumerate(raw_gt):
        where = f"time_gt[{i}]"
        if not isinstance(pair, list) or len(pair) != 2:
            raise SchemaError(f"{where} must be a [start, end] pair")
        s, e = (_frame_index(x, video.fps, where) for x in pair)
        if s < 0 or e < s:
            raise InvariantError(f"{where}: invalid interval [{s}, {e}]")
        gts.append(Interval(s, e))
    response = _parse_response(_require(doc, "response", dict), expected_k=len(gts))
    hint = doc.get("vocab_hint")
    if hint is not None:
        if not isinstance(hint, dict) or not all(isinstance(v, str) for v in hint.values()):
            raise SchemaError("vocab_hint must map token ids to strings")
        try:
            hint = {int(k): v for k, v in hint.items()}
        except ValueError as exc:
            raise SchemaError("vocab_hint keys must be integer strings") from exc
    sid = doc.get("id")
    if sid is not None and not isinstance(sid, str):
        raise SchemaError("id must be a string")
    return AnnotationSample(video, question, response, tuple(gts), hint, sid)


def parse_annotation(data: Union[bytes, str]) -> AnnotationSample:
    """Parse and validate one annotation document.

    Raises SchemaError for structural problems and InvariantError for
    semantic ones; any other input failure is reported as SchemaError.
    """
    try:
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
        doc = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise SchemaError(f"not a UTF-8 JSON document: {exc}") from exc
    return from_document(doc)


def _video_doc(video):
    if isinstance(video, VideoRef):
        doc = {"path": video.path, "T": video.T, "C": video.C}
        if video.fps != 1.0:
            doc["fps"] = video.fps
        return doc
    if video.fps != 1.0:
        return {"T": video.T, "C": video.C, "data": video.frames.reshape(-1).tolist(), "fps": video.fps}
    return video.frames.tolist()


def response_doc(resp: ResponseSequence) -> dict:
    answer = [{"text": list(p.tokens)} if isinstance(p, TextSpan) else {"evi": p.index}
              for p in resp.answer_parts]
    return {"grounding_k": resp.K, "answer": answer}


def to_document(sample: AnnotationSample) -> dict:
    doc = {
        "video": _video_doc(sample.video),
        "question": list(sample.question),
        "response": response_doc(sample.response),
        "time_gt": [iv.to_list() for iv in sample.time_gt],
    }
    if sample.vocab_hint is not None:
        doc["vocab_hint"] = {str(k): v for k, v in sample.vocab_hint}
    if sample.sample_id is not None:
        doc["id"] = sample.sample_id
    return doc


def canonical_json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def serialize_annotation(sample: AnnotationSample) -> bytes:
    """Canonical bytes: sorted keys, compact separators."""
    return canonical_json(to_document(sample))


def same_sample(a: AnnotationSample, b: AnnotationSample) -> bool:
    """Semantic equality: run-time features and slot provenance are ignored."""
    return serialize_annotation(a) == serialize_annotation(b)


# ------------------------------------------------------------------ preference pairs

class Factor(enum.Enum):
    TEMPORAL_SHIFT = "TemporalShift"
    ADD_EVENT = "AddEvent"
    DELETE_EVENT = "DeleteEvent"
    MERGE_EVENTS = "MergeEvents"
    DISTORT_TEXT = "DistortText"
    REPEAT_TEXT = "RepeatText"

    @property
    def temporal(self) -> bool:
        return self in TEMPORAL_FACTORS


TEMPORAL_FACTORS = frozenset({Factor.TEMPORAL_SHIFT, Factor.ADD_EVENT, Factor.DELETE_EVENT,
                              Factor.MERGE_EVENTS})
TEXT_FACTORS = frozenset({Factor.DISTORT_TEXT, Factor.REPEAT_TEXT})


@dataclass(frozen=True)
class GroundedResponse:
    """A response together with the intervals it claims for its evidence slots."""

    response: ResponseSequence
    intervals: tuple[Interval, ...]

    def __post_init__(self):
        object.__setattr__(self, "intervals", tuple(self.intervals))

    def events(self) -> list[tuple[Interval, tuple[int, ...]]]:
        texts = self.response.event_texts()
        if len(texts) != len(self.intervals):
            texts = [()] * len(self.intervals)
        return list(zip(self.intervals, texts))


@dataclass(frozen=True)
class PerturbationRecord:
    factor: Factor
    events: tuple[int, ...]
    intervals_before: tuple[Interval, ...] = ()
    intervals_after: tuple[Interval, ...] = ()
    text_before: tuple[tuple[int, ...], ...] = ()
    text_after: tuple[tuple[int, ...], ...] = ()

    def changes_something(self) -> bool:
        return self.intervals_before != self.intervals_after or self.text_before != self.text_after


@dataclass(frozen=True)
class Provenance:
    factor: Factor
    records: tuple[PerturbationRecord, ...]


@dataclass(frozen=True)
class PreferencePair:
    base: AnnotationSample
    preferred: GroundedResponse
    dispreferred: GroundedResponse
    provenance: Provenance


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self):
        return f"{self.field}: {self.rule}"


def _check_response(gr: GroundedResponse, T: int, name: str) -> list[Violation]:
    out = []
    r = gr.response
    if len(gr.intervals) != r.K:
        out.append(Violation(f"{name}.intervals", f"{len(gr.intervals)} intervals for K={r.K}"))
    n_refs = len(r.ref_indices())
    if n_refs not in (0, r.K):
        out.append(Violation(f"{name}.response", f"{n_refs} references for K={r.K}"))
    ivs = gr.intervals
    if any(not iv.fits(T) for iv in ivs):
        out.append(Violation(f"{name}.intervals", f"interval outside [0, {T - 1}]"))
    if any(b.start < a.start for a, b in zip(ivs, ivs[1:])):
        out.append(Violation(f"{name}.intervals", "not in temporal order"))
    if any(a.overlaps(b) for a, b in zip(ivs, ivs[1:])):
        out.append(Violation(f"{name}.intervals", "events overlap"))
    return out


def _is_subsequence(small, big) -> bool:
    it = iter(big)
    return all(any(x == y for y in it) for x in small)


def validate_pair(pair: PreferencePair) -> list[Violation]:
    """Return one record per violated pair invariant; empty means valid."""
    v: list[Violation] = []
    base, pref, disp = pair.base, pair.preferred, pair.dispreferred
    factor = pair.provenance.factor
    if pref.response.structure() != base.response.structure() or pref.intervals != base.time_gt:
        v.append(Violation("preferred", "must equal the base sample's response and time_gt"))
    v += _check_response(pref, base.T, "preferred")
    v += _check_response(disp, base.T, "dispreferred")
    if v:
        return v
    if (pref.response.structure(), pref.intervals) == (disp.response.structure(), disp.intervals):
        return [Violation("dispreferred", "identical to preferred")]
    for i, rec in enumerate(pair.provenance.records):
        if rec.factor is not factor:
            v.append(Violation(f"provenance.records[{i}]", "factor differs from the pair's factor"))
        if not rec.changes_something():
            v.append(Violation(f"provenance.records[{i}]", "record describes no change"))
    if not pair.provenance.records:
        v.append(Violation("provenance.records", "no perturbation recorded"))

    pe, de = pref.events(), disp.events()
    p_iv, d_iv = list(pref.intervals), list(disp.intervals)
    p_tx, d_tx = [t for _, t in pe], [t for _, t in de]
    kp, kd = len(pe), len(de)
    tail_same = pref.response.tail_text() == disp.response.tail_text()

    if factor is Factor.TEMPORAL_SHIFT:
        if kd != kp:
            v.append(Violation("dispreferred.intervals", "shift must keep the event count"))
        elif p_iv == d_iv:
            v.append(Violation("dispreferred.intervals", "shift left every interval unchanged"))
        if p_tx != d_tx or not tail_same:
            v.append(Violation("dispreferred.response", "shift must not change text"))
    elif factor is Factor.ADD_EVENT:
        if kd <= kp:
            v.append(Violation("dispreferred.intervals", "add must increase the event count"))
        elif not _is_subsequence(pe, de):
            v.append(Violation("dispreferred", "original events must survive unchanged"))
        else:
            extra = [e for e in de if e not in pe]
            if any(t not in p_tx for _, t in extra):
                v.append(Violation("dispreferred.response", "added event text must copy an existing event"))
        if not tail_same:
            v.append(Violation("dispreferred.response", "add must not change trailing text"))
    elif factor is Factor.DELETE_EVENT:
        if kd >= kp:
            v.append(Violation("dispreferred.intervals", "delete must decrease the event count"))
        elif not _is_subsequence(de, pe):
            v.append(Violation("dispreferred", "remaining events must be unchanged originals"))
        if not tail_same:
            v.append(Violation("dispreferred.response", "delete must not change trailing text"))
    elif factor is Factor.MERGE_EVENTS:
        if kd >= kp:
            v.append(Violation("dispreferred.intervals", "merge must decrease the event count"))
        elif not _merge_consistent(pe, de):
            v.append(Violation("dispreferred", "events are not a merge of adjacent originals"))
        if not tail_same:
            v.append(Violation("dispreferred.response", "merge must not change trailing text"))
    elif factor is Factor.DISTORT_TEXT:
        if d_iv != p_iv:
            v.append(Violation("dispreferred.intervals", "text factor must not change intervals"))
        elif p_tx == d_tx:
            v.append(Violation("dispreferred.response", "distortion left every event text unchanged"))
        elif pref.response.K and disp.response.K and len(pref.response.ref_indices()) != len(disp.response.ref_indices()):
            v.append(Violation("dispreferred.response", "text factor must keep evidence references"))
    elif factor is Factor.REPEAT_TEXT:
        if d_iv != p_iv:
            v.append(Violation("dispreferred.intervals", "text factor must not change intervals"))
        else:
            changed = [k for k in range(kp) if p_tx[k] != d_tx[k]]
            if not changed:
                v.append(Violation("dispreferred.response", "repeat left every event text unchanged"))
            for k in changed:
                if k == 0 or d_tx[k] != p_tx[k - 1]:
                    v.append(Violation("dispreferred.response",
                                       f"event {k} text is not a repeat of event {k - 1}"))
    return v


def _merge_consistent(pe, de) -> bool:
    """Every dispreferred event is an original or the hull of a run of adjacent originals."""
    i = 0
    merged_any = False
    for iv, text in de:
        j = i
        acc_text: tuple[int, ...] = ()
        while j < len(pe):
            acc_text = acc_text + pe[j][1]
            hull = Interval(pe[i][0].start, pe[j][0].end)
            j += 1
            if hull == iv and acc_text == text:
                break
        else:
            return False
        if j - i > 1:
            merged_any = True
        i = j
    return i == len(pe) and merged_any


# ------------------------------------------------------------------ pair files

def _grounded_doc(gr: GroundedResponse) -> dict:
    return {"response": response_doc(gr.response), "intervals": [iv.to_list() for iv in gr.intervals]}


def _record_doc(r: PerturbationRecord) -> dict:
    return {
        "factor": r.factor.value,
        "events": list(r.events),
        "intervals_before": [iv.to_list() for iv in r.intervals_before],
        "intervals_after": [iv.to_list() for iv in r.intervals_after],
        "text_before": [list(t) for t in r.text_before],
        "text_after": [list(t) for t in r.text_after],
    }


def pair_to_document(pair: PreferencePair) -> dict:
    return {
        "base_id": pair.base.sample_id,
        "preferred": _grounded_doc(pair.preferred),
        "dispreferred": _grounded_doc(pair.dispreferred),
        "provenance": {
            "factor": pair.provenance.factor.value,
            "records": [_record_doc(r) for r in pair.provenance.records],
        },
    }


def serialize_pair(pair: PreferencePair) -> bytes:
    return canonical_json(pair_to_document(pair))


def _parse_grounded(doc, where) -> GroundedResponse:
    resp = _parse_response(_require(doc, "response", dict, where))
    ivs = tuple(Interval(*p) for p in _require(doc, "intervals", list, where))
    return GroundedResponse(resp, ivs)


def parse_pair(data: Union[bytes, str], base: AnnotationSample) -> PreferencePair:
    """Rebuild a pair from its file; ``base`` is looked up by ``base_id`` by the caller."""
    try:
        doc = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"not a JSON document: {exc}") from exc
    if doc.get("base_id") != base.sample_id:
        raise InvariantError(f"pair base_id {doc.get('base_id')!r} != sample {base.sample_id!r}")
    prov = _require(doc, "provenance", dict)
    records = []
    for r in prov.get("records", []):
        records.append(PerturbationRecord(
            Factor(r["factor"]), tuple(r["events"]),
            tuple(Interval(*p) for p in r["intervals_before"]),
            tuple(Interval(*p) for p in r["intervals_after"]),
            tuple(tuple(t) for t in r["text_before"]),
            tuple(tuple(t) for t in r["text_after"]),
        ))
    return PreferencePair(
        base,
        _parse_grounded(_require(doc, "preferred", dict), "preferred"),
        _parse_grounded(_require(doc, "dispreferred", dict), "dispreferred"),
        Provenance(Factor(prov["factor"]), tuple(records)),
    )
