"""On-disk datasets, preference-pair directories and their manifests.

A dataset directory holds ``<split>/<id>.json`` annotation files next to
``<split>/<id>.feat`` feature files, plus ``manifest.json`` listing every
annotation with its sha256.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Sequence

from .domain import (AnnotationSample, InvariantError, PreferencePair, SchemaError, VideoFeatures, VideoRef,
                     canonical_json, parse_annotation, parse_pair, serialize_annotation, serialize_pair,
                     write_feature_file)

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class DataError(RuntimeError):
    pass


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_manifest(directory: Path, doc: dict) -> str:
    data = canonical_json(doc) + b"\n"
    (directory / MANIFEST).write_bytes(data)
    return sha256_bytes(data)


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise DataError(f"missing manifest: {path}")
    try:
        doc = json.loads(path.read_bytes())
    except ValueError as exc:
        raise DataError(f"unreadable manifest {path}: {exc}") from exc
    if doc.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {doc.get('format_version')}")
    return doc


def write_split(directory: Path, split: str, samples: Sequence[AnnotationSample]) -> list[dict]:
    """Write annotations with external feature files; returns manifest entries."""
    sub = directory / split
    sub.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        feat_name = f"{s.sample_id}.feat"
        video = s.video if isinstance(s.video, VideoFeatures) else s.video.load(directory)
        write_feature_file(sub / feat_name, video)
        ref = VideoRef(feat_name, video.T, video.C, video.fps)
        data = serialize_annotation(dataclasses.replace(s, video=ref))
        name = f"{split}/{s.sample_id}.json"
        (directory / name).write_bytes(data)
        entries.append({"file": name, "sha256": sha256_bytes(data),
                        "features": f"{split}/{feat_name}", "features_sha256": sha256_file(sub / feat_name)})
    return entries


def load_split(directory: str | Path, split: str, verify: bool = True) -> list[AnnotationSample]:
    """Samples of one split with their features loaded, in manifest order."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    entries = manifest.get("splits", {}).get(split)
    if entries is None:
        raise DataError(f"{directory}: no split {split!r} in manifest")
    out = []
    for e in entries:
        path = directory / e["file"]
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        if verify and sha256_bytes(data) != e["sha256"]:
            raise DataError(f"{path}: checksum does not match the manifest")
        try:
            s = parse_annotation(data)
            feats = s.features(path.parent)
        except (SchemaError, InvariantError) as exc:
            raise DataError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise DataError(f"{path}: cannot load features: {exc}") from exc
        if s.sample_id is None:
            s = dataclasses.replace(s, sample_id=path.stem)
        out.append(dataclasses.replace(s, video=feats))
    return out


def write_pairs(directory: Path, split: str, pairs: Sequence[PreferencePair]) -> list[dict]:
    sub = directory / split
    sub.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        data = serialize_pair(p)
        name = f"{split}/{p.base.sample_id}.json"
        (directory / name).write_bytes(data)
        entries.append({"file": name, "sha256": sha256_bytes(data), "base_id": p.base.sample_id,
                        "factor": p.provenance.factor.value})
    return entries


def load_pairs(directory: str | Path, split: str, samples: Sequence[AnnotationSample]) -> list[PreferencePair]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    entries = manifest.get("splits", {}).get(split)
    if entries is None:
        raise DataError(f"{directory}: no split {split!r} in pair manifest")
    by_id = {s.sample_id: s for s in samples}
    out = []
    for e in entries:
        path = directory / e["file"]
        data = path.read_bytes()
        if sha256_bytes(data) != e["sha256"]:
            raise DataError(f"{path}: checksum does not match the manifest")
        base = by_id.get(e["base_id"])
        if base is None:
            raise DataError(f"{path}: base sample {e['base_id']!r} not found in the dataset")
        try:
            out.append(parse_pair(data, base))
        except (SchemaError, InvariantError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: {exc}") from exc
    return out
