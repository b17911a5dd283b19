import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import assert_grad_close, central_diff
from structflow.flow import (
    LEFT_FIXED,
    RIGHT_FIXED,
    CouplingLayer,
    Flow,
    flow_from_dict,
    flow_to_dict,
    forward_apply,
    init_flow,
    inverse_apply,
    inverse_apply_with_grad,
)


def identity_g_layer():
    # relu(x) @ I with x >= 0 gives g(x) = x
    one = np.ones((1, 1))
    return CouplingLayer(LEFT_FIXED, one, np.zeros(1), one, np.zeros(1))


def naive_inverse(flow, x):
    """Scalar loops over the coupling equations."""
    h = [float(v) for v in x]
    half = flow.dim // 2
    for layer in flow.layers:
        fixed_idx = range(half) if layer.side == LEFT_FIXED else range(half, flow.dim)
        moved_idx = range(half, flow.dim) if layer.side == LEFT_FIXED else range(half)
        fixed = [h[i] for i in fixed_idx]
        hidden = []
        for r in range(half):
            s = layer.b1[r]
            for c in range(half):
                s += layer.w1[r, c] * fixed[c]
            hidden.append(max(s, 0.0))
        for r, i in enumerate(moved_idx):
            s = layer.b2[r]
            for c in range(half):
                s += layer.w2[r, c] * hidden[c]
            h[i] += s
    return np.array(h)


def test_depth_zero_is_identity():
    flow = init_flow(6, 0, seed=1)
    x = np.random.default_rng(0).normal(size=6)
    e, log_det = inverse_apply(flow, x)
    assert np.array_equal(e, x) and log_det == 0.0
    assert np.array_equal(forward_apply(flow, x), x)
    assert flow.params() == []


def test_identity_coupling_hand_example():
    flow = Flow(2, [identity_g_layer()])
    e, log_det = inverse_apply(flow, np.array([1.0, 1.0]))
    assert np.array_equal(e, [1.0, 2.0]) and log_det == 0.0
    assert np.array_equal(forward_apply(flow, np.array([1.0, 2.0])), [1.0, 1.0])


def test_two_layers_match_scalar_reimplementation():
    flow = init_flow(4, 2, seed=11)
    for layer in flow.layers:
        layer.b1[:] = np.random.default_rng(3).normal(size=2)
        layer.b2[:] = np.random.default_rng(4).normal(size=2)
    x = np.random.default_rng(5).normal(size=(7, 4))
    e, _ = inverse_apply(flow, x)
    for row, out in zip(x, e):
        np.testing.assert_allclose(out, naive_inverse(flow, row), rtol=0, atol=1e-13)


def test_batch_and_single_agree():
    flow = init_flow(8, 3, seed=2)
    x = np.random.default_rng(1).normal(size=(5, 8))
    e, log_det = inverse_apply(flow, x)
    assert log_det.shape == (5,) and not log_det.any()
    for i in range(5):
        np.testing.assert_allclose(inverse_apply(flow, x[i])[0], e[i], rtol=0, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(half=st.integers(1, 50), depth=st.integers(0, 16), seed=st.integers(0, 2**31))
def test_round_trip(half, depth, seed):
    flow = init_flow(2 * half, depth, seed)
    x = np.random.default_rng(seed).normal(scale=3.0, size=(4, 2 * half))
    e, _ = inverse_apply(flow, x)
    assert np.max(np.abs(forward_apply(flow, e) - x)) <= 1e-9


def test_composition_order():
    flow = init_flow(6, 2, seed=9)
    a = Flow(6, flow.layers[:1])
    # a lone right-fixed layer is not a valid flow, so apply B by hand
    b = flow.layers[1]
    x = np.random.default_rng(2).normal(size=(3, 6))
    h, _ = inverse_apply(a, x)
    fixed, moved = b.split(h)
    np.testing.assert_array_equal(inverse_apply(flow, x)[0], b.join(fixed, moved + b.coupling(fixed)))


def test_unit_jacobian_by_finite_differences():
    rng = np.random.default_rng(0)
    for d in (2, 4, 6, 8):
        flow = init_flow(d, 5, seed=d)
        x = rng.normal(size=d)
        jac = np.empty((d, d))
        for j in range(d):
            step = np.zeros(d)
            step[j] = 1e-6
            jac[:, j] = (inverse_apply(flow, x + step)[0] - inverse_apply(flow, x - step)[0]) / 2e-6
        assert abs(np.log(abs(np.linalg.det(jac)))) <= 1e-4


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    flow = init_flow(6, 3, seed=7)
    for layer in flow.layers:
        layer.b1[:] = rng.normal(scale=0.3, size=3)
        layer.b2[:] = rng.normal(scale=0.3, size=3)
    x = rng.normal(size=(4, 6))
    up = rng.normal(size=(4, 6))

    def objective():
        return float((inverse_apply(flow, x)[0] * up).sum())

    _, grad_x, grads = inverse_apply_with_grad(flow, x, up)
    for a, n in zip(grads, central_diff(objective, flow.params(), 1e-5)):
        assert_grad_close(a, n)
    assert_grad_close(grad_x, central_diff(objective, [x], 1e-5)[0])


def test_gradient_depth_zero_and_accumulation():
    flow = init_flow(4, 0)
    up = np.arange(4.0)
    _, gx, grads = inverse_apply_with_grad(flow, np.ones(4), up)
    assert np.array_equal(gx, up) and grads == []

    flow = init_flow(4, 2, seed=1)
    x = np.random.default_rng(0).normal(size=(3, 4))
    up = np.ones((3, 4))
    _, _, once = inverse_apply_with_grad(flow, x, up)
    acc = flow.zeros_like_params()
    inverse_apply_with_grad(flow, x, up, acc)
    inverse_apply_with_grad(flow, x, up, acc)
    for a, b in zip(acc, once):
        np.testing.assert_allclose(a, 2 * b)


def test_relu_kink_uses_zero_subgradient():
    # pre-activation of the single hidden unit is exactly 0 at x_left = 0
    one = np.ones((1, 1))
    flow = Flow(2, [CouplingLayer(LEFT_FIXED, one, np.zeros(1), 2 * one, np.zeros(1))])
    x = np.array([0.0, 0.5])
    up = np.array([0.0, 1.0])
    _, gx, grads = inverse_apply_with_grad(flow, x, up)
    assert gx[0] == 0.0 and grads[0][0, 0] == 0.0

    def f(v):
        return float(inverse_apply(flow, np.array([v, 0.5]))[0][1])

    right = (f(1e-3) - f(0.0)) / 1e-3
    left = (f(0.0) - f(-1e-3)) / 1e-3
    assert min(left, right) <= gx[0] <= max(left, right)


def test_init_distribution_and_determinism():
    flow = init_flow(100, 20, seed=123)
    w = np.concatenate([l.w1.ravel() for l in flow.layers] + [l.w2.ravel() for l in flow.layers])
    assert w.size == 100_000
    assert abs(w.std() - np.sqrt(1 / 50)) <= 0.02 * np.sqrt(1 / 50)
    assert np.max(np.abs(w)) <= np.sqrt(3 / 50)
    assert all(not l.b1.any() and not l.b2.any() for l in flow.layers)
    again = init_flow(100, 20, seed=123)
    assert all(np.array_equal(a, b) for a, b in zip(flow.params(), again.params()))
    assert [l.side for l in flow.layers[:3]] == [LEFT_FIXED, RIGHT_FIXED, LEFT_FIXED]


@pytest.mark.parametrize("dim", [0, 3, 7])
def test_odd_dimension_rejected(dim):
    with pytest.raises(ValueError):
        init_flow(dim, 2)


def test_dimension_mismatch_rejected():
    flow = init_flow(4, 1, seed=0)
    with pytest.raises(ValueError):
        inverse_apply(flow, np.zeros(6))
    with pytest.raises(ValueError):
        forward_apply(flow, np.zeros((2, 3)))


def test_non_alternating_layers_rejected():
    layer = identity_g_layer()
    with pytest.raises(ValueError):
        Flow(2, [layer, identity_g_layer()])


def test_serialisation_round_trip():
    flow = init_flow(6, 3, seed=4)
    back = flow_from_dict(flow_to_dict(flow))
    assert all(np.array_equal(a, b) for a, b in zip(flow.params(), back.params()))
