import collections

import numpy as np
import pytest

from evigrid.domain import TEMPORAL_FACTORS, TEXT_FACTORS, Factor, Interval, serialize_pair, validate_pair
from evigrid.model import GeneratorConfig, make_toy_dataset
from evigrid.synth import (DistorterError, InfeasibleFactor, RemoteDistorter, SynthConfig, VocabInfo,
                           choose_factor_and_events, feasible_factors, normalized_weights, parse_factor,
                           perturb_temporal, perturb_text, rule_based_distort, shift_interval, synthesize_for,
                           synthesize_pair)

from conftest import make_sample

VOCAB = VocabInfo.from_generator(GeneratorConfig())


def test_shift_pinned():
    assert shift_interval(Interval(10, 15), 0.4, +1, 30) == Interval(13, 18)
    assert shift_interval(Interval(0, 3), 0.5, -1, 30) == Interval(0, 1)


def test_k1_feasible_factors():
    s = make_sample(gts=((2, 4),), texts=[(5,)])
    assert set(feasible_factors(s)) == {Factor.TEMPORAL_SHIFT, Factor.ADD_EVENT, Factor.DELETE_EVENT,
                                        Factor.DISTORT_TEXT}
    rng = np.random.default_rng(0)
    seen = {choose_factor_and_events(s, SynthConfig(), rng)[0] for _ in range(500)}
    assert seen == set(feasible_factors(s))


def test_selection_deterministic():
    s = make_sample()
    a = [choose_factor_and_events(s, SynthConfig(), np.random.default_rng(4)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_uniform_frequencies_k4():
    s = make_sample(T=20, gts=((0, 2), (4, 6), (8, 10), (12, 14)), texts=[(5,), (6,), (7,), (8,)])
    rng = np.random.default_rng(0)
    counts = collections.Counter(choose_factor_and_events(s, SynthConfig(), rng)[0] for _ in range(10000))
    for f in Factor:
        assert abs(counts[f] / 10000 - 1 / 6) <= 0.02


def test_k0_is_infeasible():
    with pytest.raises(InfeasibleFactor):
        choose_factor_and_events(make_sample(gts=(), texts=[]), SynthConfig(), np.random.default_rng(0))


def test_merge_and_delete():
    s = make_sample(T=12, gts=((2, 4), (6, 9)), texts=[(5,), (6,)])
    disp, recs = perturb_temporal(s, Factor.MERGE_EVENTS, (0, 1), SynthConfig(), np.random.default_rng(0))
    assert disp.intervals == (Interval(2, 9),) and disp.response.K == 1
    s3 = make_sample(T=12, gts=((0, 1), (3, 5), (7, 9)), texts=[(5,), (6,), (7,)])
    disp, _ = perturb_temporal(s3, Factor.DELETE_EVENT, (0, 2), SynthConfig(), np.random.default_rng(0))
    assert disp.intervals == (Interval(3, 5),)


def test_repeat_copies_previous_text():
    s = make_sample(texts=[(5,), (6,)])
    disp, _ = perturb_text(s, Factor.REPEAT_TEXT, (1,), rule_based_distort, np.random.default_rng(0), VOCAB)
    assert disp.response.event_texts() == [(5,), (5,)]
    assert disp.intervals == s.time_gt


def test_rule_distort_properties():
    rng = np.random.default_rng(0)
    assert rule_based_distort((8,), rng, VOCAB) != (8,)
    assert rule_based_distort((8,), rng, VOCAB)[0] in VOCAB.concept_tokens
    for _ in range(1000):
        span = tuple(int(t) for t in rng.integers(4, 13, size=int(rng.integers(1, 5))))
        out = rule_based_distort(span, rng, VOCAB)
        assert out != span and len(out) in (len(span) - 1, len(span))
    a = rule_based_distort((5, 6, 7), np.random.default_rng(3), VOCAB)
    assert a == rule_based_distort((5, 6, 7), np.random.default_rng(3), VOCAB)


def test_synthesized_pairs_valid_and_pure():
    g = GeneratorConfig()
    cfg = SynthConfig(vocab=VocabInfo.from_generator(g))
    for s in make_toy_dataset(1000, g, 11):
        pair = synthesize_for(s, cfg)
        assert validate_pair(pair) == []
        assert pair.preferred.response.structure() == s.response.structure()
        f = pair.provenance.factor
        pe, de = pair.preferred.events(), pair.dispreferred.events()
        if f in TEMPORAL_FACTORS and f is not Factor.MERGE_EVENTS:
            surviving = [t for _, t in de]
            assert all(t in [x for _, x in pe] for t in surviving)
        if f in TEXT_FACTORS:
            assert pair.dispreferred.intervals == pair.preferred.intervals


def test_synthesis_is_byte_reproducible():
    g = GeneratorConfig()
    cfg = SynthConfig(vocab=VocabInfo.from_generator(g))
    data = make_toy_dataset(50, g, 2)
    a = [serialize_pair(synthesize_for(s, cfg)) for s in data]
    b = [serialize_pair(synthesize_for(s, cfg)) for s in reversed(data)]
    assert a == list(reversed(b))


def test_factor_weights_respected():
    g = GeneratorConfig()
    cfg = SynthConfig(factor_weights=normalized_weights({"shift": 1.0}), vocab=VocabInfo.from_generator(g))
    for s in make_toy_dataset(50, g, 2):
        assert synthesize_for(s, cfg).provenance.factor is Factor.TEMPORAL_SHIFT


def test_weighted_distribution_matches_config():
    # events spaced widely enough that every perturbation is feasible on the first attempt
    s = make_sample(T=40, gts=((3, 5), (13, 15), (23, 25), (33, 35)), texts=[(5,), (6,), (7,), (8,)])
    w = normalized_weights({"shift": 3, "distort": 1})
    cfg = SynthConfig(factor_weights=w)
    rng = np.random.default_rng(1)
    counts = collections.Counter(synthesize_pair(s, cfg, rng).provenance.factor for _ in range(2000))
    assert abs(counts[Factor.TEMPORAL_SHIFT] / 2000 - 0.75) < 0.03


def test_parse_factor_aliases():
    assert parse_factor("shift") is Factor.TEMPORAL_SHIFT
    assert parse_factor("MergeEvents") is Factor.MERGE_EVENTS
    with pytest.raises(ValueError):
        parse_factor("nope")
    with pytest.raises(ValueError):
        SynthConfig(shift_range=(0.5, 0.2))


def test_remote_distorter_unreachable():
    d = RemoteDistorter("http://127.0.0.1:9/", timeout=0.5)
    with pytest.raises(DistorterError):
        d((5, 6), np.random.default_rng(0), VOCAB)


def test_remote_distorter_protocol():
    import http.server
    import json
    import threading

    class H(http.server.BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            toks = body["tokens"]
            out = json.dumps({"tokens": toks[::-1] if len(set(toks)) > 1 else toks}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(out)

        def log_message(self, *a):
            pass

    srv = http.server.HTTPServer(("127.0.0.1", 0), H)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    try:
        d = RemoteDistorter(f"http://127.0.0.1:{srv.server_port}/")
        assert d((5, 6), None, VOCAB) == (6, 5)
        with pytest.raises(DistorterError):
            d((5,), None, VOCAB)
    finally:
        srv.shutdown()
