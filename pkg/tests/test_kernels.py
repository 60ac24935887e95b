import importlib
import os
import subprocess
import sys

import numpy as np
import pytest

from evigrid import _kernels
from evigrid._kernels import _pykernels as py

try:
    from evigrid._kernels import _ckernels as cy
except ImportError:
    cy = None

needs_compiled = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


def _close(a, b):
    if isinstance(a, (tuple, list)):
        return len(a) == len(b) and all(_close(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


@needs_compiled
@pytest.mark.parametrize("L", [1, 3, 17])
def test_compiled_matches_fallback(L):
    rng = np.random.default_rng(L)
    C, heads = 12, 3
    qkv = rng.standard_normal((L, 3 * C))
    g = rng.standard_normal((L, C))
    x = rng.standard_normal((L, C))
    gain, bias = rng.standard_normal((1, C)), rng.standard_normal((1, C))
    o, p = py.attention_forward(qkv, heads)
    assert _close((o, p), cy.attention_forward(qkv, heads))
    assert _close(py.attention_backward(g, qkv, p, heads), cy.attention_backward(g, qkv, p, heads))
    f = py.layer_norm_forward(x, gain, bias, 1e-5)
    assert _close(f, cy.layer_norm_forward(x, gain, bias, 1e-5))
    assert _close(py.layer_norm_backward(g, f[1], f[2], gain), cy.layer_norm_backward(g, f[1], f[2], gain))
    out, th = py.gelu_forward(x)
    assert _close((out, th), cy.gelu_forward(x))
    assert _close(py.gelu_backward(g, x, th), cy.gelu_backward(g, x, th))
    lsm = py.log_softmax_forward(x)
    assert _close(lsm, cy.log_softmax_forward(x))
    assert _close(py.log_softmax_backward(g, lsm), cy.log_softmax_backward(g, lsm))
    sims = rng.uniform(-0.05, 1.05, (4, L))
    y = (rng.uniform(size=(4, L)) > 0.5) * 1.0
    assert _close(py.bernoulli_loglik(sims, y, 1e-6), cy.bernoulli_loglik(sims, y, 1e-6))
    a = py.best_interval(sims[0], 1e-6)
    b = cy.best_interval(sims[0], 1e-6)
    assert a[:2] == b[:2] and a[2] == pytest.approx(b[2], abs=1e-12)
    ious = np.round(rng.uniform(size=(4, 3)), 1)
    assert py.greedy_match(ious, 0.3) == cy.greedy_match(ious, 0.3)


def test_best_interval_tie_breaks_earliest_then_shortest():
    sims = np.array([0.5, 0.5, 0.5])
    for k in (py,) + ((cy,) if cy is not None else ()):
        assert k.best_interval(sims, 1e-7)[:2] == (0, 0)


def test_backend_selection_by_environment():
    code = "from evigrid import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, EVIGRID_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert _kernels.BACKEND in ("python", "compiled")


def test_kernels_accept_read_only_inputs():
    s = np.array([[0.2, 0.7, 0.9]])
    s.setflags(write=False)
    y = np.array([[0.0, 1.0, 1.0]])
    ll, _ = _kernels.bernoulli_loglik(s, y, 1e-7)
    assert ll[0] == pytest.approx(np.log(0.8 * 0.7 * 0.9))
    assert _kernels.best_interval(s[0], 1e-7)[:2] == (1, 2)
