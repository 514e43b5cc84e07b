import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from composer import tensor as T
from composer.errors import ConfigError, DataError, UsageError
from composer.tensor import ParamStore, Tape, Tensor


def grads_of(fn, params):
    params.zero_grad()
    with Tape() as tape:
        out = fn(params)
    T.backward(tape, out, params)
    g = params.grads_snapshot()
    params.zero_grad()
    return g


def test_affine_examples():
    out = T.affine(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])
    out = T.affine(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [[6.0]])


def test_affine_matches_triple_loop(rng):
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    ref = np.zeros((3, 2))
    for i in range(3):
        for o in range(2):
            ref[i, o] = b[o] + sum(x[i, k] * W[k, o] for k in range(4))
    np.testing.assert_allclose(T.affine(Tensor(x), Tensor(W), Tensor(b)).data, ref, atol=1e-12)


def test_relu_values_and_subgradient():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    v = np.array([0.5, 3.0])
    np.testing.assert_array_equal(T.relu(Tensor(v)).data, v)
    ps = ParamStore()
    ps.add("x", np.array([2.0, -1.0, 0.0]))
    g = grads_of(lambda p: T.tensor_sum(T.relu(p["x"])), ps)["x"]
    np.testing.assert_array_equal(g, [1.0, 0.0, 0.0])


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_np(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    out = T.softmax_np(np.array([[1000.0, 1000.0]]))
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax_np(np.log([[1.0, 3.0]])), [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(logits):
    p = T.softmax_np(logits)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_log_likelihood_examples():
    ll = T.log_likelihood(Tensor([[0.0, 0.0]]), [0]).data[0]
    assert ll == pytest.approx(np.log(0.5), abs=1e-12)
    # ln sigmoid(20) = -log1p(exp(-20))
    ll = T.log_likelihood(Tensor([[10.0, -10.0]]), [0]).data[0]
    assert ll == pytest.approx(-np.log1p(np.exp(-20.0)), rel=1e-9)
    assert ll == pytest.approx(-2.061153622438558e-09, rel=1e-9)
    ll = T.log_likelihood(Tensor(np.zeros((1, 20))), [7]).data[0]
    assert ll == pytest.approx(np.log(1 / 20), abs=1e-12)


def test_log_likelihood_rejects_bad_label():
    with pytest.raises(DataError):
        T.log_likelihood(Tensor(np.zeros((1, 3))), [3])


def test_backward_affine_bias_gets_seed():
    ps = ParamStore()
    ps.add("W", np.eye(2))
    ps.add("b", np.zeros(2))
    with Tape() as tape:
        out = T.affine(Tensor([[1.0, 2.0]]), ps["W"], ps["b"])
    seed = np.array([[0.3, -0.7]])
    T.backward(tape, [out], ps, [seed])
    np.testing.assert_array_equal(ps.grad("b"), [0.3, -0.7])


def test_backward_accumulates():
    ps = ParamStore()
    ps.add("w", np.array([1.5, -2.0]))
    fn = lambda p: T.tensor_sum(T.mul(p["w"], p["w"]))  # noqa: E731
    for _ in range(2):
        with Tape() as tape:
            out = fn(ps)
        T.backward(tape, out, ps)
    np.testing.assert_allclose(ps.grad("w"), 2 * 2 * ps.value("w"))


def test_backward_is_linear(rng):
    ps = ParamStore()
    ps.add("W", rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(4, 3)))
    f = lambda p: T.tensor_sum(T.tanh(T.matmul(x, p["W"])))  # noqa: E731
    g = lambda p: T.tensor_sum(T.exp(T.matmul(x, p["W"])))  # noqa: E731
    both = grads_of(lambda p: T.add(f(p), g(p)), ps)["W"]
    np.testing.assert_allclose(both, grads_of(f, ps)["W"] + grads_of(g, ps)["W"], atol=1e-12)


def test_backward_rejects_empty_or_reused_tape():
    ps = ParamStore()
    ps.add("w", np.ones(2))
    with Tape() as tape:
        pass
    with pytest.raises(UsageError):
        T.backward(tape, Tensor(1.0), ps)
    with Tape() as tape:
        out = T.tensor_sum(ps["w"])
    T.backward(tape, out, ps)
    with pytest.raises(UsageError):
        T.backward(tape, out, ps)


def test_sgd_step_examples():
    ps = ParamStore()
    ps.add("w", np.array([1.0]))
    ps.grad("w")[:] = 2.0
    T.sgd_step(ps, 0.1)
    assert ps.value("w")[0] == pytest.approx(1.2)
    assert ps.grad("w")[0] == 0.0
    T.sgd_step(ps, 0.1)
    assert ps.value("w")[0] == pytest.approx(1.2)
    with pytest.raises(ConfigError):
        T.sgd_step(ps, 0.0)


def test_sgd_two_small_steps_equal_one_big(rng):
    a, b = ParamStore(), ParamStore()
    v, g = rng.normal(size=5), rng.normal(size=5)
    a.add("w", v.copy())
    b.add("w", v.copy())
    for _ in range(2):
        a.grad("w")[:] = g
        T.sgd_step(a, 0.1)
    b.grad("w")[:] = g
    T.sgd_step(b, 0.2)
    np.testing.assert_allclose(a.value("w"), b.value("w"), atol=1e-12)


def test_sgd_step_then_reverse_restores(rng):
    ps = ParamStore()
    v, g = rng.normal(size=4), rng.normal(size=4)
    ps.add("w", v.copy())
    ps.grad("w")[:] = g
    T.sgd_step(ps, 0.3)
    ps.grad("w")[:] = -g
    T.sgd_step(ps, 0.3)
    np.testing.assert_allclose(ps.value("w"), v, atol=1e-12)


def test_finite_diff_quadratic():
    ps = ParamStore()
    ps.add("theta", np.array([3.0]))
    err = T.finite_diff_check(lambda p: T.scale(T.tensor_sum(T.mul(p["theta"], p["theta"])), 0.5), ps)
    assert err < 1e-8


def test_finite_diff_mlp(rng):
    ps = ParamStore()
    ps.add("W1", rng.normal(size=(4, 5)))
    ps.add("b1", rng.normal(size=5) * 0.1)
    ps.add("W2", rng.normal(size=(5, 3)))
    ps.add("b2", np.zeros(3))
    x, y = Tensor(rng.normal(size=(6, 4))), rng.integers(0, 3, 6)

    def loss(p):
        h = T.relu(T.affine(x, p["W1"], p["b1"]))
        return T.mean(T.log_likelihood(T.affine(h, p["W2"], p["b2"]), y))

    assert T.finite_diff_check(loss, ps) < 1e-5


def test_finite_diff_large_step_degrades(rng):
    ps = ParamStore()
    ps.add("w", rng.normal(size=3))
    loss = lambda p: T.tensor_sum(T.exp(T.scale(p["w"], 3.0)))  # noqa: E731
    small = T.finite_diff_check(loss, ps, h=1e-6)
    large = T.finite_diff_check(loss, ps, h=0.1)
    assert small < 1e-7 < large


def test_structural_ops_gradients(rng):
    ps = ParamStore()
    ps.add("a", rng.normal(size=(6, 8)))
    ps.add("c", rng.normal(size=(6, 2)))
    idx0, idx1 = np.array([0, 3, 4]), np.array([1, 2, 5])
    cols = np.array([1, 4, 6])

    def loss(p):
        a = p["a"]
        pooled = T.avg_pool(a, 2, 4, 2)
        left = T.take_cols(a, cols)
        parts = [T.scale(T.take_rows(left, idx0), 2.0), T.tanh(T.take_rows(left, idx1))]
        merged = T.merge_rows(parts, [idx0, idx1], 6)
        joined = T.concat([merged, pooled, p["c"]], axis=1)
        sm = T.softmax(joined)
        return T.add(T.tensor_sum(T.mul(sm, joined)), T.tensor_sum(T.pick(T.log_softmax(joined), [0, 1, 2, 3, 4, 5])))

    assert T.finite_diff_check(loss, ps) < 1e-5


def test_avg_pool_values():
    x = np.arange(16.0).reshape(1, 16)  # 4x4 image
    out = T.avg_pool(Tensor(x), 4, 4, 2).data
    np.testing.assert_allclose(out, [[2.5, 4.5, 10.5, 12.5]])


def test_stop_gradient_blocks():
    ps = ParamStore()
    ps.add("w", np.array([2.0]))
    g = grads_of(lambda p: T.tensor_sum(T.mul(p["w"], T.stop_gradient(p["w"]))), ps)["w"]
    np.testing.assert_allclose(g, [2.0])


def test_tape_nodes_visited_once():
    ps = ParamStore()
    ps.add("w", np.array([1.0, 2.0]))
    with Tape() as tape:
        a = T.mul(ps["w"], ps["w"])
        out = T.tensor_sum(T.add(a, a))
    T.backward(tape, out, ps)
    np.testing.assert_allclose(ps.grad("w"), 4 * ps.value("w"))


def test_no_tape_records_nothing():
    ps = ParamStore()
    ps.add("w", np.ones(2))
    with Tape() as tape:
        with T.no_tape():
            T.tensor_sum(ps["w"])
    assert len(tape) == 0
