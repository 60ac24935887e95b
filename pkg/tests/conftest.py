import numpy as np
import pytest

from evigrid.domain import AnnotationSample, Interval, ResponseSequence, VideoFeatures
from evigrid import autograd as ag
from evigrid.fpo import FpoConfig, ResponseLogProb, fpo_loss
from evigrid.model import GeneratorConfig, ModelConfig, init_model, make_toy_sample

# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def fpo_loss_of(pref: float, dispref: float, beta: float = 1.0) -> float:
    c = lambda v: ag.const([[v]])  # noqa: E731
    return fpo_loss(ResponseLogProb(c(pref), c(0.0), c(pref)), ResponseLogProb(c(dispref), c(0.0), c(dispref)),
                    FpoConfig(beta=beta)).item()


def small_model_config(**kw) -> ModelConfig:
    base = dict(d_model=8, feat_dim=8, vocab=16, layers=1, heads=2, max_T=16,
                max_question_len=4, max_answer_len=8, k_max=3)
    base.update(kw)
    return ModelConfig(**base)


def small_generator(cfg: ModelConfig) -> GeneratorConfig:
    return GeneratorConfig(T_min=8, T_max=cfg.max_T, feat_dim=cfg.feat_dim, n_concepts=6,
                           events_min=1, events_max=3, event_len_min=1, event_len_max=4)


def make_sample(T=10, C=4, gts=((1, 3), (5, 7)), texts=None, question=(4, 5), seed=0, sid="x",
                with_refs=True) -> AnnotationSample:
    rng = np.random.default_rng(seed)
    texts = texts if texts is not None else [(5 + k,) for k in range(len(gts))]
    resp = ResponseSequence.from_events(texts, with_refs=with_refs)
    return AnnotationSample(VideoFeatures(rng.standard_normal((T, C))), tuple(question), resp,
                            tuple(Interval(*g) for g in gts), None, sid)


@pytest.fixture
def tiny_cfg():
    return small_model_config()


@pytest.fixture
def tiny_store(tiny_cfg):
    return init_model(tiny_cfg, 0)


@pytest.fixture
def tiny_sample(tiny_cfg):
    return make_toy_sample(small_generator(tiny_cfg), 3, "t0")
