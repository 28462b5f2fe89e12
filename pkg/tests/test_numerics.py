import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contaqa import numerics as nx
from contaqa.numerics import OptimizerState, ParamSet, ShapeError, Tensor


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def test_chain_rule_scalar_example():
    ps = ParamSet()
    ps.add("w", np.array([[2.0]]))

    def fn(inp, p):
        return nx.sq_error(nx.matmul(inp["x"], p["w"]), np.array([[5.0]]))

    out, grads = nx.forward_backward(fn, {"x": np.array([[3.0]])}, ps)
    assert out["loss"] == 1.0
    assert grads["w"][0, 0] == 6.0


def test_relu_dead_region_and_zero_subgradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    y = nx.relu(x)
    nx.tsum(y).backward()
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_mean_pool_gradient():
    x = Tensor(np.array([2.0, 4.0, 6.0]), requires_grad=True)
    m = nx.mean(x)
    assert m.item() == 4.0
    m.backward()
    np.testing.assert_allclose(x.grad, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_shape_errors_name_the_node():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError) as err:
        nx.matmul(a, b)
    assert err.value.node == "matmul"
    with pytest.raises(ShapeError, match="add"):
        nx.add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError, match="concat"):
        nx.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)


def test_non_scalar_loss_rejected():
    ps = ParamSet()
    ps.add("w", np.ones(3))
    with pytest.raises(ShapeError):
        nx.forward_backward(lambda inp, p: nx.mul(p["w"], 2.0), {}, ps)


def test_finite_difference_quadratic():
    ps = ParamSet()
    ps.add("x", np.array(3.0))
    g = nx.finite_diff_gradient(lambda inp, p: nx.mul(p["x"], p["x"]), {}, ps, h=1e-4)
    assert abs(g["x"] - 6.0) < 1e-7


def test_constant_loss_has_zero_gradient():
    ps = ParamSet()
    ps.add("w", np.ones((2, 2)))
    fn = lambda inp, p: nx.tsum(Tensor(np.ones(3)))  # noqa: E731
    _, grads = nx.forward_backward(fn, {}, ps)
    assert not grads["w"].any()
    assert not nx.finite_diff_gradient(fn, {}, ps)["w"].any()


def _small_net_loss(inp, p):
    h = nx.relu(nx.linear(inp["x"], p["w1"], p["b1"]))
    h2 = nx.concat([h, h], axis=-1)
    out = nx.linear(h2, p["w2"], p["b2"])
    return nx.mse(nx.reshape(out, (out.shape[0],)), inp["y"])


@pytest.mark.parametrize("seed", range(5))
def test_reverse_mode_matches_finite_difference(seed):
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    ps.add("w1", rng.normal(size=(4, 6)))
    ps.add("b1", rng.normal(size=6))
    ps.add("w2", rng.normal(size=(12, 1)))
    ps.add("b2", rng.normal(size=1))
    inputs = {"x": rng.normal(size=(5, 4)), "y": rng.normal(size=5)}
    with nx.relu_margin() as margins:
        _, grads = nx.forward_backward(_small_net_loss, inputs, ps)
    if min(margins) < 1e-3:
        pytest.skip("sample point too close to a ReLU kink")
    fd = nx.finite_diff_gradient(_small_net_loss, inputs, ps, h=1e-4)
    for k in grads:
        assert rel_err(grads[k], fd[k]) < 1e-4


def test_broadcast_matmul_and_take_gradients():
    rng = np.random.default_rng(3)
    ps = ParamSet()
    ps.add("A", rng.normal(size=(3, 3)))
    ps.add("v", rng.normal(size=(2, 4, 3, 2)))

    def fn(inp, p):
        mixed = nx.matmul(p["A"], p["v"])
        shifted = nx.take(mixed, (slice(None), slice(0, 3)))
        return nx.tsum(nx.mul(shifted, shifted))

    _, grads = nx.forward_backward(fn, {}, ps)
    fd = nx.finite_diff_gradient(fn, {}, ps)
    for k in grads:
        assert rel_err(grads[k], fd[k]) < 1e-6


def test_forward_backward_is_deterministic():
    rng = np.random.default_rng(0)
    ps = ParamSet()
    ps.add("w1", rng.normal(size=(4, 6)))
    ps.add("b1", rng.normal(size=6))
    ps.add("w2", rng.normal(size=(12, 1)))
    ps.add("b2", rng.normal(size=1))
    inputs = {"x": rng.normal(size=(5, 4)), "y": rng.normal(size=5)}
    a = nx.forward_backward(_small_net_loss, inputs, ps)
    b = nx.forward_backward(_small_net_loss, inputs, ps)
    assert a[0]["loss"].tobytes() == b[0]["loss"].tobytes()
    for k in a[1]:
        assert a[1][k].tobytes() == b[1][k].tobytes()


# --------------------------------------------------------------------------- #
# Adam


def _two_group_params(value=0.5):
    ps = ParamSet()
    ps.add("g", np.array([value]), group="graph")
    ps.add("o", np.array([value]), group="other")
    return ps


def test_adam_first_step_magnitude():
    ps = ParamSet()
    ps.add("w", np.array([0.0]))
    state = OptimizerState(weight_decay=0.0)
    nx.adam_update(ps, {"w": np.array([1.0])}, state, {"graph": 0.01, "other": 0.001})
    assert state.step == 1
    assert abs(ps["w"].data[0] + 0.001 / (1 + 1e-8)) < 1e-15


def test_adam_group_rates_differ_by_ten():
    ps = _two_group_params()
    state = OptimizerState()
    nx.adam_update(ps, {"g": np.array([0.3]), "o": np.array([0.3])}, state, {"graph": 0.01, "other": 0.001})
    dg = 0.5 - ps["g"].data[0]
    do = 0.5 - ps["o"].data[0]
    assert dg / do == pytest.approx(10.0, rel=1e-12)


def test_adam_missing_gradient_and_lr_group():
    ps = _two_group_params()
    with pytest.raises(KeyError):
        nx.adam_update(ps, {"g": np.zeros(1)}, OptimizerState(), {"graph": 0.01, "other": 0.001})
    with pytest.raises(KeyError):
        nx.adam_update(ps, {"g": np.zeros(1), "o": np.zeros(1)}, OptimizerState(), {"graph": 0.01})


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.integers(1, 20))
def test_adam_zero_gradients_is_identity(values, steps):
    ps = ParamSet()
    ps.add("w", np.array(values), group="other")
    ps.add("a", np.array(values), group="graph")
    before = ps.arrays()
    state = OptimizerState(weight_decay=0.0)
    for _ in range(steps):
        nx.adam_update(ps, {"w": np.zeros(len(values)), "a": np.zeros(len(values))}, state,
                       {"graph": 0.01, "other": 0.001})
    for k, v in before.items():
        np.testing.assert_array_equal(ps[k].data, v)


def test_weight_decay_is_decoupled():
    ps = ParamSet()
    ps.add("w", np.array([2.0]))
    state = OptimizerState(weight_decay=1e-5)
    nx.adam_update(ps, {"w": np.array([0.0])}, state, {"graph": 0.01, "other": 0.001})
    assert ps["w"].data[0] == pytest.approx(2.0 - 0.001 * 1e-5 * 2.0, abs=1e-18)
