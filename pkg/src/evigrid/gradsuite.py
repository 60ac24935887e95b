"""Finite-difference checks of the four training objectives on small random instances."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .domain import Interval
from .fpo import FpoConfig, pair_loss
from .grounding import frame_similarities
from .losses import loss_cons, loss_gnd
from .model import GeneratorConfig, ModelConfig, init_model, make_toy_sample, sample_loss
from .synth import SynthConfig, VocabInfo, synthesize_pair

TOLERANCE = 1e-4
TERMS = ("consistency", "grounding", "total", "fpo")


@dataclass
class SuiteRow:
    term: str
    instances: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _random_intervals(rng, K: int, T: int) -> list[Interval]:
    cuts = np.sort(rng.choice(np.arange(T + 1), size=2 * K, replace=False))
    return [Interval(int(cuts[2 * k]), int(cuts[2 * k + 1]) - 1) for k in range(K)]


def _leaf_store(**arrays) -> ag.ParamStore:
    store = ag.ParamStore()
    for name, value in arrays.items():
        store.add(name, value)
    return store


def _tiny_model(rng) -> ModelConfig:
    C = int(rng.choice([8, 16]))
    return ModelConfig(d_model=C, feat_dim=C, vocab=16, layers=1, heads=2, max_T=16,
                       max_question_len=4, max_answer_len=8, k_max=3)


def _tiny_generator(cfg: ModelConfig) -> GeneratorConfig:
    return GeneratorConfig(T_min=8, T_max=cfg.max_T, feat_dim=cfg.feat_dim, n_concepts=6,
                           events_min=1, events_max=3, event_len_min=1, event_len_max=4, noise=0.1)


def check_consistency(rng, seed: int) -> float:
    K, C = int(rng.integers(1, 4)), int(rng.integers(2, 17))
    store = _leaf_store(s1=rng.standard_normal((K, C)), s2=rng.standard_normal((K, C)))
    return ag.grad_check(lambda p: loss_cons(p["s1"], p["s2"]), store, seed=seed)


def check_grounding(rng, seed: int) -> float:
    K, T, C = int(rng.integers(1, 4)), int(rng.integers(6, 17)), int(rng.integers(2, 17))
    gts = _random_intervals(rng, K, T)
    store = _leaf_store(query=rng.standard_normal((K, C)), frames=rng.standard_normal((T, C)))
    return ag.grad_check(lambda p: loss_gnd(frame_similarities(p["query"], p["frames"]), gts), store, seed=seed)


def check_total(rng, seed: int) -> float:
    cfg = _tiny_model(rng)
    store = init_model(cfg, seed)
    sample = make_toy_sample(_tiny_generator(cfg), seed, f"g{seed}")
    return ag.grad_check(lambda p: sample_loss(p, cfg, sample).node, store, seed=seed)


def check_fpo(rng, seed: int) -> float:
    cfg = _tiny_model(rng)
    gcfg = _tiny_generator(cfg)
    store = init_model(cfg, seed)
    sample = make_toy_sample(gcfg, seed, f"g{seed}")
    scfg = SynthConfig(vocab=VocabInfo.from_generator(gcfg))
    pair = synthesize_pair(sample, scfg, np.random.default_rng(seed))
    return ag.grad_check(lambda p: pair_loss(p, cfg, pair, FpoConfig()).loss, store, seed=seed)


CHECKS = {
    "consistency": check_consistency,
    "grounding": check_grounding,
    "total": check_total,
    "fpo": check_fpo,
}


def run_suite(instances: int = 20, seed: int = 0, canary: bool = False) -> list[SuiteRow]:
    """One row per objective with the worst relative error over ``instances`` problems."""
    rows = []
    for term in TERMS:
        rng = np.random.default_rng([seed, TERMS.index(term)])
        t0 = time.perf_counter()
        worst = 0.0
        for i in range(instances):
            if canary:
                with ag.sign_flip_canary():
                    err = CHECKS[term](rng, seed * 1000 + i)
            else:
                err = CHECKS[term](rng, seed * 1000 + i)
            worst = max(worst, err)
        rows.append(SuiteRow(term, instances, worst, time.perf_counter() - t0))
    return rows


def format_table(rows: list[SuiteRow]) -> str:
    out = [f"{'term':<12} {'instances':>9} {'max_rel_err':>12} {'status':>6}"]
    for r in rows:
        out.append(f"{r.term:<12} {r.instances:>9d} {r.max_rel_error:>12.3e} {'ok' if r.passed else 'FAIL':>6}")
    return "\n".join(out)
