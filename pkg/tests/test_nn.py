import numpy as np
import pytest
from util_fd import (
    perturbed_mlp,
    random_mlp_direction,
    relative_error,
    relu_kink_safe,
)

from koopmhe.errors import ConfigError, TrainingDivergedError
from koopmhe.nn import AdamState, Mlp, adam_init, adam_step, init_mlp


def test_zero_weights_output_is_bias():
    net = init_mlp([3, 4, 2], rng=0)
    for w in net.weights:
        w[:] = 0.0
    net.biases[-1][:] = [1.5, -2.0]
    y, _ = net.forward(np.array([0.3, -0.1, 2.0]))
    np.testing.assert_array_equal(y, [1.5, -2.0])


def test_single_identity_layer_passthrough():
    net = Mlp([3, 3], [np.eye(3)], [np.zeros(3)], "relu")
    x = np.array([0.5, -1.2, 3.0])
    y, _ = net.forward(x)
    np.testing.assert_array_equal(y, x)


def test_hand_computed_322_net():
    # weights chosen so the chain is easy to evaluate on paper
    w1 = np.array([[1.0, -2.0, 0.5], [0.0, 1.0, 1.0]])
    b1 = np.array([0.1, -0.2])
    w2 = np.array([[2.0, -1.0], [0.5, 0.5]])
    b2 = np.array([0.0, 1.0])
    net = Mlp([3, 2, 2], [w1, w2], [b1, b2], "relu")
    x = np.array([1.0, 0.5, -1.0])
    # layer 1 pre-activation: [1 - 1 - 0.5 + 0.1, 0.5 - 1 - 0.2] = [-0.4, -0.7]
    # relu -> [0, 0]; output = b2 = [0, 1]
    y, _ = net.forward(x)
    np.testing.assert_allclose(y, [0.0, 1.0], atol=0.0)
    x2 = np.array([2.0, 0.0, 0.0])
    # pre-activation: [2.1, -0.2] -> relu [2.1, 0]; out = [4.2, 1.05 + 1]
    y2, _ = net.forward(x2)
    np.testing.assert_allclose(y2, [4.2, 2.05], rtol=1e-15)


def test_forward_shape_error():
    net = init_mlp([3, 2], rng=0)
    with pytest.raises(ValueError):
        net.forward(np.zeros(4))


def test_backward_zero_cotangent():
    net = init_mlp([4, 5, 2], rng=1)
    x = np.linspace(-1, 1, 4)
    _, cache = net.forward(x)
    gw, gb, gx = net.backward(cache, np.zeros(2))
    assert all(np.all(g == 0) for g in gw)
    assert all(np.all(g == 0) for g in gb)
    assert np.all(gx == 0)


def test_backward_scalar_chain_rule():
    w = 1.7
    x = 0.6
    net = Mlp([1, 1], [np.array([[w]])], [np.zeros(1)], "relu")
    _, cache = net.forward(np.array([x]))
    gw, _, gx = net.backward(cache, np.array([1.0]))
    assert gw[0][0, 0] == pytest.approx(x, abs=0.0)
    assert gx[0] == pytest.approx(w, abs=0.0)


def test_backward_rejects_stale_cache():
    net = init_mlp([3, 4, 2], rng=2)
    other = init_mlp([3, 5, 2], rng=3)
    _, cache = other.forward(np.zeros(3))
    with pytest.raises(ValueError):
        net.backward(cache, np.zeros(2))


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_gradients_match_finite_differences_100_pairs(activation):
    # scalarize the output with a fixed probe vector, then compare the
    # directional derivative over (params, input) with central differences
    rng = np.random.default_rng(12345)
    checked = 0
    while checked < 100:
        dims = [int(rng.integers(2, 6)) for _ in range(3)]
        net = init_mlp(dims, rng, activation)
        x = rng.standard_normal(dims[0])
        if not relu_kink_safe(net, x, margin=1e-3):
            continue
        probe = rng.standard_normal(dims[-1])
        d_params = random_mlp_direction(net, rng)
        d_x = rng.standard_normal(dims[0])

        _, cache = net.forward(x)
        gw, gb, gx = net.backward(cache, probe)
        analytic = sum(float(np.sum(a * b)) for a, b in zip(gw + gb, d_params))
        analytic += float(gx @ d_x)

        eps = 1e-5
        def value(h):
            shifted = perturbed_mlp(net, d_params, h)
            y, _ = shifted.forward(x + h * d_x)
            return float(probe @ y)

        fd = (value(eps) - value(-eps)) / (2 * eps)
        assert relative_error(analytic, fd, floor=1e-8) < 1e-4
        checked += 1


def test_forward_deterministic_bitwise():
    net = init_mlp([6, 8, 3], rng=7)
    x = np.random.default_rng(0).standard_normal((5, 6))
    y1, _ = net.forward(x)
    y2, _ = net.forward(x)
    assert np.array_equal(y1, y2)


def test_adam_zero_gradient_fixed_point():
    params = [np.array([1.0, -2.0]), np.array([[0.5]])]
    state = adam_init(params)
    before = [p.copy() for p in params]
    adam_step(params, [np.zeros(2), np.zeros((1, 1))], state)
    for p, b in zip(params, before):
        np.testing.assert_array_equal(p, b)
    assert all(np.all(m == 0) for m in state.first_moments)
    assert all(np.all(v == 0) for v in state.second_moments)
    assert state.step_count == 1


def test_adam_first_step_magnitude():
    params = [np.array([0.0])]
    state = adam_init(params, learning_rate=1e-3)
    adam_step(params, [np.array([0.37])], state)
    # bias-corrected first step is learning_rate * g / (|g| + eps)
    assert abs(params[0][0]) == pytest.approx(1e-3, rel=1e-4)


def test_adam_descends_quadratic():
    params = [np.array([2.0])]
    state = adam_init(params, learning_rate=0.1)
    def loss():
        return float((params[0][0] - 1.0) ** 2)
    l0 = loss()
    for _ in range(2):
        g = 2.0 * (params[0] - 1.0)
        adam_step(params, [g], state)
    assert loss() < l0


def test_adam_rejects_nonfinite_gradients():
    params = [np.array([1.0])]
    state = adam_init(params)
    with pytest.raises(TrainingDivergedError):
        adam_step(params, [np.array([np.nan])], state)


def test_init_deterministic_and_shapes():
    a = init_mlp([9, 32, 13], rng=42)
    b = init_mlp([9, 32, 13], rng=42)
    assert a.weights[0].shape == (32, 9)
    assert a.weights[1].shape == (13, 32)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    assert all(np.all(bb == 0) for bb in a.biases)


def test_init_weight_scale():
    net = init_mlp([1000, 1000], rng=3)
    target = np.sqrt(2.0 / 2000.0)  # std of U(-a, a) with a = sqrt(6/2000)
    assert abs(net.weights[0].std() - target) / target < 0.2


def test_init_rejects_bad_dims():
    with pytest.raises(ConfigError):
        init_mlp([4], rng=0)
    with pytest.raises(ConfigError):
        init_mlp([4, 0, 2], rng=0)
    with pytest.raises(ConfigError):
        init_mlp([4, 3], rng=0, activation="sigmoid")
