import math

import numpy as np
import pytest

from evigrid import autograd as ag


def test_logistic_zero_and_grad():
    x = ag.Node(np.zeros((1, 1)), requires_grad=True)
    y = ag.logistic(x)
    assert y.item() == 0.5
    ag.backward(y)
    assert x.grad[0, 0] == 0.25


def test_log_softmax_uniform():
    out = ag.log_softmax(ag.const(np.zeros((1, 3)))).value
    assert np.allclose(out, math.log(1 / 3), atol=1e-15)


def test_matmul_shape_error():
    with pytest.raises(ag.ShapeError):
        ag.matmul(ag.const(np.zeros((2, 3))), ag.const(np.zeros((2, 2))))


def test_sum_grad_is_ones():
    store = ag.ParamStore()
    p = store.add("p", np.arange(6.0).reshape(2, 3))
    ag.backward(ag.reduce_sum(p))
    assert np.array_equal(p.grad, np.ones((2, 3)))


def test_backward_needs_scalar():
    with pytest.raises(ag.NotScalarError):
        ag.backward(ag.const(np.zeros((2, 2))))


def test_grad_check_quadratic():
    store = ag.ParamStore()
    store.add("p", np.random.default_rng(0).standard_normal((4, 5)))
    err = ag.grad_check(lambda s: ag.scale(ag.reduce_sum(ag.mul(s["p"], s["p"])), 0.5), store)
    assert err < 1e-9


def test_grad_check_rejects_nonfinite():
    store = ag.ParamStore()
    store.add("p", -np.ones((1, 1)))
    with pytest.raises(ag.NonFiniteError):
        ag.grad_check(lambda s: ag.log(s["p"]), store)


def _composite(s):
    h = ag.tanh(ag.add(ag.matmul(s["x"], s["w"]), s["b"]))
    h = ag.layer_norm(h, s["g"], s["c"])
    h = ag.gelu(ag.causal_attention(ag.concat([h, h, h], axis=1), 2))
    lp = ag.log_softmax(h)
    return ag.add(ag.reduce_mean(ag.pick(lp, [0, 1, 2, 3, 0])), ag.reduce_sum(ag.softplus(ag.take_rows(h, [1, 3]))))


def test_grad_check_composite():
    rng = np.random.default_rng(1)
    store = ag.ParamStore()
    store.add("x", rng.standard_normal((5, 3)))
    store.add("w", rng.standard_normal((3, 4)))
    store.add("b", rng.standard_normal((1, 4)))
    store.add("g", 1 + 0.1 * rng.standard_normal((1, 4)))
    store.add("c", 0.1 * rng.standard_normal((1, 4)))
    assert ag.grad_check(_composite, store, n_coords=200) < 1e-6


def test_adam_first_step_magnitude():
    store = ag.ParamStore()
    p = store.add("p", np.array([[1.0]]))
    p.grad = np.array([[1.0]])
    ag.adam_step(store, lr=0.1)
    assert p.value[0, 0] == pytest.approx(0.9, abs=1e-6)


def test_adam_zero_grad_keeps_params_and_counts():
    store = ag.ParamStore()
    p = store.add("p", np.array([[2.0, -1.0]]))
    ag.adam_step(store, lr=0.1)
    assert np.array_equal(p.value, [[2.0, -1.0]])
    assert store.step == 1


def test_adam_converges_on_quadratic():
    target = np.array([[1.5, -0.5, 2.0]])
    store = ag.ParamStore()
    p = store.add("p", np.zeros((1, 3)))
    for _ in range(200):
        ag.backward(ag.reduce_sum(ag.mul(ag.sub(p, target), ag.sub(p, target))))
        ag.adam_step(store, lr=0.05)
    for _ in range(200):
        ag.backward(ag.reduce_sum(ag.mul(ag.sub(p, target), ag.sub(p, target))))
        ag.adam_step(store, lr=0.005)
    assert np.abs(p.value - target).max() < 1e-3


def test_checkpoint_round_trip(tmp_path):
    store = ag.ParamStore()
    store.add("a", np.array([[0.5, 0.25]]))
    store.add("b", np.arange(6.0).reshape(2, 3))
    store.step = 7
    store.save(tmp_path / "m.ckpt", meta={"k": 1})
    back, meta = ag.ParamStore.load_with_meta(tmp_path / "m.ckpt")
    assert back.names() == ["a", "b"] and back.step == 7 and meta == {"k": 1}
    assert np.array_equal(back.flat(), store.flat())


def test_sign_flip_canary_breaks_gradients():
    store = ag.ParamStore()
    store.add("p", np.array([[0.3, -0.2]]))
    fn = lambda s: ag.reduce_sum(ag.logistic(s["p"]))  # noqa: E731
    assert ag.grad_check(fn, store) < 1e-9
    with ag.sign_flip_canary():
        assert ag.grad_check(fn, store) > 1e-4


def test_no_grad_builds_no_graph():
    store = ag.ParamStore()
    p = store.add("p", np.ones((1, 2)))
    with ag.no_grad():
        y = ag.reduce_sum(ag.mul(p, p))
    assert not y.requires_grad


def test_determinism():
    def run():
        rng = np.random.default_rng(5)
        store = ag.ParamStore()
        for n, shp in (("x", (5, 3)), ("w", (3, 4)), ("b", (1, 4)), ("g", (1, 4)), ("c", (1, 4))):
            store.add(n, rng.standard_normal(shp))
        loss = _composite(store)
        ag.backward(loss)
        return loss.value.copy(), [store[n].grad.copy() for n in store.names()]
    a, b = run(), run()
    assert np.array_equal(a[0], b[0])
    assert all(np.array_equal(x, y) for x, y in zip(a[1], b[1]))
