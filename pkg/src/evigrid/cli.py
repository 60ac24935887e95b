"""Command-line entry point.

Every command reads an INI config (``--config``) plus ``--set section.key=value``
overrides, and writes the resolved config next to its outputs.

Exit codes: 0 ok, 2 config error, 3 data error, 4 acceptance failure.
"""

from __future__ import annotations

import argparse
import collections
import dataclasses
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path


from . import autograd as ag
from . import evaluation as ev
from . import fpo as fp
from . import gradsuite
from . import grounding as gr
from . import model as M
from . import synth as sy
from .config import RunConfig
from .domain import InvariantError, SchemaError, parse_annotation
from .files import (DataError, MANIFEST_VERSION, load_pairs, load_split, sha256_file, write_manifest,
                    write_pairs, write_split)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ACCEPT = 0, 2, 3, 4


class AcceptanceFailure(RuntimeError):
    pass


def _threads() -> int:
    raw = os.environ.get("EVIGRID_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise M.ConfigError("EVIGRID_THREADS", f"expected an integer, got {raw!r}") from None


def pmap(fn, items):
    """Order-preserving map over a bounded thread pool."""
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _log(msg: str) -> None:
    print(msg, flush=True)


# ------------------------------------------------------------------ checkpoints

def _model_meta(cfg: M.ModelConfig) -> dict:
    return {"model": dataclasses.asdict(cfg)}


def _load_checkpoint(path: Path) -> tuple[ag.ParamStore, M.ModelConfig]:
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        store, meta = ag.ParamStore.load_with_meta(path)
        cfg = M.ModelConfig(**meta["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint: {exc}") from exc
    return store, cfg


def _checkpoint_path(rc: RunConfig, section: str) -> Path:
    raw = rc.get(section, "checkpoint").strip()
    return Path(raw) if raw else rc.path("paths", "train_dir") / "model.ckpt"


# ------------------------------------------------------------------ commands

def cmd_gen_data(rc: RunConfig, args) -> int:
    gcfg = rc.generator()
    mcfg = rc.model()
    gcfg.validate(mcfg)
    seed = rc.getint("data", "seed")
    out = rc.path("paths", "data_dir")
    out.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split, key in (("train", "n_train"), ("heldout", "n_heldout")):
        n = rc.getint("data", key)
        if n < 0:
            raise M.ConfigError(f"data.{key}", "must be >= 0")
        concepts = gcfg.concept_vectors()
        width = max(4, len(str(max(n - 1, 0))))
        ids = [f"{split}-{i:0{width}d}" for i in range(n)]
        samples = pmap(lambda sid: M.make_toy_sample(gcfg, M.derive_seed(seed, sid), sid, concepts), ids)
        splits[split] = write_split(out, split, samples)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "kind": "toy-dataset",
        "seed": seed,
        "generator": dataclasses.asdict(gcfg),
        "splits": splits,
        "counts": {k: len(v) for k, v in splits.items()},
    }
    digest = write_manifest(out, manifest)
    rc.write(out)
    _log(f"wrote {len(splits['train'])} train / {len(splits['heldout'])} heldout samples to {out}")
    _log(f"manifest sha256 {digest}")
    return EXIT_OK


def _training_set(rc: RunConfig) -> list:
    data = load_split(rc.path("paths", "data_dir"), "train")
    if not rc.getbool("train", "evidence_refs"):
        data = [M.strip_answer_refs(s) for s in data]
    return data


def cmd_train(rc: RunConfig, args) -> int:
    if args.epochs is not None:
        rc.set("train", "epochs", args.epochs)
    mcfg = rc.model()
    if not rc.getbool("train", "evidence_refs"):
        mcfg = dataclasses.replace(mcfg, answer_refs=False)
    tcfg = rc.train()
    data = _training_set(rc)
    out = rc.path("paths", "train_dir")
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out)
    store = M.init_model(mcfg, rc.getint("model", "init_seed"))
    log_rows = []
    t0 = time.perf_counter()

    def on_epoch(i, means):
        log_rows.append((i + 1, means))
        _log(f"epoch {i + 1:3d}  total {means['total']:.4f}  sft {means['sft']:.4f}  "
             f"gnd {means['gnd']:.4f}  cons {means['cons']:.4f}  ({time.perf_counter() - t0:.0f}s)")

    try:
        report = M.train(store, mcfg, data, tcfg, on_epoch) if tcfg.epochs else M.TrainReport()
    except M.SampleError as exc:
        if isinstance(exc.cause, FloatingPointError):
            raise AcceptanceFailure(f"non-finite loss: {exc}") from exc
        raise DataError(str(exc)) from exc
    store.save(out / "model.ckpt", _model_meta(mcfg))
    with open(out / "train_log.tsv", "w", encoding="utf-8") as f:
        f.write("epoch\tsft\tgnd\tcons\ttotal\n")
        for epoch, m in log_rows:
            f.write(f"{epoch}\t{m['sft']!r}\t{m['gnd']!r}\t{m['cons']!r}\t{m['total']!r}\n")
    doc = {"epochs": report.epochs, "steps": report.steps, "seconds": time.perf_counter() - t0,
           "n_samples": len(data), "parameters": store.num_parameters()}
    (out / "train_report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if report.epochs and not math.isfinite(report.final_total):
        raise AcceptanceFailure("final training loss is non-finite")
    _log(f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _synth_config(rc: RunConfig) -> sy.SynthConfig:
    try:
        spec = {}
        for item in rc.get("synth", "factors").split(","):
            if item.strip():
                name, _, w = item.partition("=")
                spec[name.strip()] = float(w) if w.strip() else 1.0
        weights = sy.normalized_weights(spec)
        gcfg = rc.generator()
        return sy.SynthConfig(
            factor_weights=tuple(weights.items()),
            shift_range=(rc.getfloat("synth", "shift_min"), rc.getfloat("synth", "shift_max")),
            max_events=rc.getint("synth", "max_events"),
            distorter=rc.get("synth", "distorter"),
            endpoint=rc.get("synth", "endpoint") or None,
            timeout=rc.getfloat("synth", "timeout"),
            max_in_flight=rc.getint("synth", "max_in_flight"),
            seed=rc.getint("synth", "seed"),
            vocab=sy.VocabInfo.from_generator(gcfg),
        )
    except ValueError as exc:
        if isinstance(exc, M.ConfigError):
            raise
        raise M.ConfigError("synth", str(exc)) from exc


def cmd_synth(rc: RunConfig, args) -> int:
    if args.factors is not None:
        rc.set("synth", "factors", args.factors)
    scfg = _synth_config(rc)
    data_dir = rc.path("paths", "data_dir")
    out = rc.path("paths", "pairs_dir")
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out)
    distorter = sy.make_distorter(scfg)
    splits, failures = {}, []
    counts = collections.Counter()
    for split in [s.strip() for s in rc.get("synth", "splits").split(",") if s.strip()]:
        samples = load_split(data_dir, split)

        def one(sample):
            try:
                return sy.synthesize_for(sample, scfg, distorter)
            except (sy.InfeasibleFactor, sy.InfeasiblePerturbation) as exc:
                return exc

        results = pmap(one, samples) if scfg.distorter == "rule" else _bounded(one, samples, scfg.max_in_flight)
        pairs = []
        for s, r in zip(samples, results):
            if isinstance(r, Exception):
                failures.append({"id": s.sample_id, "split": split, "error": str(r)})
                _log(f"skip {s.sample_id}: {r}")
            else:
                pairs.append(r)
                counts[r.provenance.factor.value] += 1
        splits[split] = write_pairs(out, split, pairs)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "kind": "preference-pairs",
        "seed": scfg.seed,
        "factor_weights": {f.value: p for f, p in scfg.factor_weights},
        "shift_range": list(scfg.shift_range),
        "max_events": scfg.max_events,
        "distorter": scfg.distorter,
        "data_manifest_sha256": sha256_file(data_dir / "manifest.json"),
        "splits": splits,
        "failures": failures,
        "factor_counts": dict(sorted(counts.items())),
    }
    digest = write_manifest(out, manifest)
    total = sum(counts.values())
    _log(f"wrote {total} pairs to {out} ({len(failures)} samples skipped)")
    for name, n in sorted(counts.items()):
        _log(f"  {name:<14} {n:5d}  {n / total:.3f}" if total else f"  {name} {n}")
    _log(f"manifest sha256 {digest}")
    return EXIT_OK


def _bounded(fn, items, in_flight: int):
    """Remote calls: at most ``in_flight`` requests at a time, results in input order."""
    with ThreadPoolExecutor(max_workers=max(1, in_flight)) as pool:
        return list(pool.map(fn, items))


def _margins(store, mcfg, pairs, fcfg) -> tuple[float, dict[str, float], list[float]]:
    vals, by_factor = [], collections.defaultdict(list)
    with ag.no_grad():
        for p in pairs:
            m = fp.pair_loss(store, mcfg, p, fcfg).margin
            vals.append(m)
            by_factor[p.provenance.factor.value].append(m)
    mean = math.fsum(vals) / len(vals) if vals else float("nan")
    return mean, {k: math.fsum(v) / len(v) for k, v in sorted(by_factor.items())}, vals


def cmd_fpo(rc: RunConfig, args) -> int:
    if args.steps is not None:
        rc.set("fpo", "steps", args.steps)
    if args.beta is not None:
        rc.set("fpo", "beta", args.beta)
    ckpt = _checkpoint_path(rc, "fpo")
    store, mcfg = _load_checkpoint(ckpt)
    data_dir, pairs_dir = rc.path("paths", "data_dir"), rc.path("paths", "pairs_dir")
    train_pairs = load_pairs(pairs_dir, "train", load_split(data_dir, "train"))
    held_pairs = load_pairs(pairs_dir, "heldout", load_split(data_dir, "heldout"))
    if not train_pairs or not held_pairs:
        raise DataError("FPO needs train and heldout pairs")
    steps = rc.optional_int("fpo", "steps")
    if steps is not None and steps < 0:
        raise M.ConfigError("fpo.steps", "must be >= 0")
    try:
        fcfg = fp.FpoConfig(beta=rc.getfloat("fpo", "beta"), lr=rc.getfloat("fpo", "lr"),
                            epochs=rc.getint("fpo", "epochs"), batch_size=rc.getint("fpo", "batch_size"),
                            seed=rc.getint("fpo", "seed"), sft_weight=rc.getfloat("fpo", "sft_weight"))
    except ValueError as exc:
        raise M.ConfigError("fpo", str(exc)) from exc
    if rc.getbool("fpo", "use_reference"):
        fcfg = fp.with_reference(fcfg, store)
    out = rc.path("paths", "fpo_dir")
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out)

    pre_mean, pre_factor, _ = _margins(store, mcfg, held_pairs, fcfg)
    _log(f"held-out margin before: {pre_mean:.4f}")
    log_path = out / "fpo_log.tsv"
    t0 = time.perf_counter()
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("step\tfpo_loss\tmargin\ttext_margin\tgrounding_margin\n")

        def write_row(row):
            log.write(f"{row['step']}\t{row['fpo_loss']!r}\t{row['margin']!r}\t"
                      f"{row['text_margin']!r}\t{row['grounding_margin']!r}\n")
            if row["step"] % 20 == 0:
                _log(f"step {row['step']:4d}  loss {row['fpo_loss']:.4f}  margin {row['margin']:.3f}")

        rows = fp.train_fpo(store, mcfg, train_pairs, fcfg, write_row, max_steps=steps) if steps != 0 else []
    if any(not math.isfinite(r["fpo_loss"]) for r in rows):
        raise AcceptanceFailure("non-finite FPO loss")
    post_mean, post_factor, _ = _margins(store, mcfg, held_pairs, fcfg)
    store.save(out / "model.ckpt", _model_meta(mcfg))
    temporal = [f.value for f in sy.Factor if f.temporal]
    report = {
        "source_checkpoint": str(ckpt),
        "steps": len(rows),
        "seconds": time.perf_counter() - t0,
        "n_train_pairs": len(train_pairs),
        "n_heldout_pairs": len(held_pairs),
        "heldout_margin": {"pre": pre_mean, "post": post_mean},
        "heldout_margin_by_factor": {k: {"pre": pre_factor[k], "post": post_factor.get(k)} for k in pre_factor},
        "heldout_temporal_margin": {
            "pre": _factor_mean(held_pairs, pre_factor, temporal),
            "post": _factor_mean(held_pairs, post_factor, temporal),
        },
        "beta": fcfg.beta,
        "use_reference": fcfg.use_reference,
    }
    (out / "fpo_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _log(f"held-out margin after:  {post_mean:.4f}")
    for k in pre_factor:
        _log(f"  {k:<14} {pre_factor[k]:9.4f} -> {post_factor[k]:9.4f}")
    if rows and not post_mean > pre_mean:
        raise AcceptanceFailure(f"held-out margin did not increase ({pre_mean:.4f} -> {post_mean:.4f})")
    return EXIT_OK


def _factor_mean(pairs, by_factor: dict[str, float], names) -> float:
    n = collections.Counter(p.provenance.factor.value for p in pairs)
    num = sum(by_factor[k] * n[k] for k in names if k in by_factor)
    den = sum(n[k] for k in names if k in by_factor)
    return num / den if den else float("nan")


def _grounding_config(rc: RunConfig) -> gr.GroundingConfig:
    try:
        return gr.GroundingConfig(salient_ratio=rc.getfloat("eval", "salient_ratio"),
                                  interval_mode=gr.IntervalMode(rc.get("eval", "interval_mode")))
    except ValueError as exc:
        raise M.ConfigError("eval.salient_ratio", str(exc)) from exc


def run_generation(store, mcfg, samples, gcfg, source: str) -> list[ev.Prediction]:
    def one(s):
        res = M.generate(store, mcfg, s.video.frames, s.question, gcfg)
        return ev.prediction_from_generation(s.sample_id, res, source)

    return pmap(one, samples)


def cmd_eval(rc: RunConfig, args) -> int:
    if args.thresholds is not None:
        rc.set("eval", "thresholds", args.thresholds)
    if args.checkpoint is not None:
        rc.set("eval", "checkpoint", args.checkpoint)
    if args.split is not None:
        rc.set("eval", "split", args.split)
    thresholds = rc.floats("eval", "thresholds")
    if not thresholds or any(not 0 <= t <= 1 for t in thresholds):
        raise M.ConfigError("eval.thresholds", "need IoU thresholds in [0, 1]")
    source = rc.get("eval", "interval_source")
    if source not in ("answer", "grounding"):
        raise M.ConfigError("eval.interval_source", "must be 'answer' or 'grounding'")
    matching = rc.get("eval", "matching")
    if matching not in ("optimal", "greedy"):
        raise M.ConfigError("eval.matching", "must be 'optimal' or 'greedy'")
    gcfg = _grounding_config(rc)
    ckpt = _checkpoint_path(rc, "eval")
    store, mcfg = _load_checkpoint(ckpt)
    mcfg = dataclasses.replace(mcfg, regrounding=rc.getbool("eval", "regrounding"))
    split = rc.get("eval", "split")
    samples = load_split(rc.path("paths", "data_dir"), split)
    limit = rc.optional_int("eval", "limit")
    if limit is not None:
        samples = samples[:limit]
    out = rc.path("paths", "eval_dir")
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out)
    preds = run_generation(store, mcfg, samples, gcfg, source)
    report = ev.evaluate(preds, samples, thresholds, rc.getfloat("eval", "iou_thresh"), matching,
                         {"checkpoint": str(ckpt), "split": split, "interval_source": source,
                          "salient_ratio": gcfg.salient_ratio, "interval_mode": gcfg.interval_mode.value,
                          "regrounding": mcfg.regrounding})
    (out / "report.json").write_bytes(report.to_json() + b"\n")
    (out / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    a = report.aggregates
    _log(f"{split}: {int(a['n_samples'])} samples  event F1 {a['event_f1']:.4f}  "
         f"P {a['event_precision']:.4f}  R {a['event_recall']:.4f}  sim_proxy {a['sim_proxy']:.4f}")
    for t in sorted(thresholds):
        key = f"R@1(IoU={t:g})"
        if key in a:
            _log(f"  {key} {a[key]:.4f}")
    _log(f"report {out / 'report.json'}")
    return EXIT_OK


def cmd_gradcheck(rc: RunConfig, args) -> int:
    t0 = time.perf_counter()
    rows = gradsuite.run_suite(args.instances, args.seed, canary=args.canary)
    print(gradsuite.format_table(rows))
    _log(f"{time.perf_counter() - t0:.1f}s")
    if not all(r.passed for r in rows):
        raise AcceptanceFailure(f"gradient check above {gradsuite.TOLERANCE:g}")
    return EXIT_OK


def _token_name(tok: int, mcfg: M.ModelConfig, names: dict[int, str]) -> str:
    special = {mcfg.bos: "<bos>", mcfg.eos: "<eos>", mcfg.evi: "<evi>", mcfg.evi_end: "</evi>"}
    return special.get(tok) or names.get(tok, str(tok))


def cmd_infer(rc: RunConfig, args) -> int:
    for key in ("sample_id", "annotation", "split", "checkpoint"):
        val = getattr(args, key)
        if val is not None:
            rc.set("infer", key, val)
    store, mcfg = _load_checkpoint(_checkpoint_path(rc, "infer"))
    ann = rc.get("infer", "annotation").strip()
    if ann:
        path = Path(ann)
        try:
            sample = parse_annotation(path.read_bytes())
            sample = dataclasses.replace(sample, video=sample.features(path.parent))
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        except (SchemaError, InvariantError) as exc:
            raise DataError(f"{path}: {exc}") from exc
    else:
        samples = load_split(rc.path("paths", "data_dir"), rc.get("infer", "split"))
        sid = rc.get("infer", "sample_id").strip()
        if not sid:
            sample = samples[0]
        else:
            matches = [s for s in samples if s.sample_id == sid]
            if not matches:
                raise DataError(f"no sample {sid!r} in split {rc.get('infer', 'split')!r}")
            sample = matches[0]
    names = dict(sample.vocab_hint or ())
    res = M.generate(store, mcfg, sample.video.frames, sample.question, _grounding_config(rc))
    show = lambda toks: " ".join(_token_name(t, mcfg, names) for t in toks)
    print(f"sample    {sample.sample_id}  (T={sample.T})")
    print(f"question  {show(sample.question)}")
    print(f"stage 1   {' '.join('<evi>' for _ in res.response.grounding_slots)} </evi>")
    for k, iv in enumerate(res.grounding_intervals):
        print(f"  slot {k}  {iv}")
    parts = []
    for p in res.response.answer_parts:
        parts.append(show(p.tokens) if hasattr(p, "tokens") else f"<evi:{p.index} {p.slot.interval}>")
    print(f"stage 2   {' '.join(parts)}{' [truncated]' if res.truncated else ''}")
    print(f"intervals {list(res.answer_intervals)}")
    if sample.time_gt:
        print(f"truth     {list(sample.time_gt)}")
    return EXIT_OK


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evigrid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="INI config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, "write the synthetic toy dataset")
    p = add("train", cmd_train, "supervised training")
    p.add_argument("--epochs", type=int)
    p = add("synth", cmd_synth, "synthesize preference pairs")
    p.add_argument("--factors", help="e.g. shift=1.0 or shift=1,merge=2")
    p = add("fpo", cmd_fpo, "preference optimization on synthesized pairs")
    p.add_argument("--steps", type=int)
    p.add_argument("--beta", type=float)
    p = add("eval", cmd_eval, "generate on a split and score it")
    p.add_argument("--thresholds", help="comma-separated IoU thresholds")
    p.add_argument("--checkpoint")
    p.add_argument("--split")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the training objectives")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canary", action="store_true", help="flip a derivative sign; the check must fail")
    p = add("infer", cmd_infer, "generate one response and print it")
    p.add_argument("--sample-id", dest="sample_id")
    p.add_argument("--annotation", help="annotation JSON file")
    p.add_argument("--split")
    p.add_argument("--checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = RunConfig.load(args.config, args.overrides)
        return args.func(rc, args)
    except M.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, InvariantError, M.LengthExceeded, M.SampleError,
            ev.MissingPrediction, sy.DistorterError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AcceptanceFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_ACCEPT


if __name__ == "__main__":
    sys.exit(main())
