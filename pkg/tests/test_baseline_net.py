from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hnca.baseline_net import (
    Activation,
    DenseLayer,
    DenseNet,
    class_probs,
    dense_forward,
    dense_greedy_actions,
    dense_policy_gradient,
)
from hnca.core import RngStream, TopologyError, UnitParams
from hnca.stochastic_net import SoftmaxUnitState, softmax_backward


def _net(act, seed=0, shape=(4, (2, 2), 3)):
    return DenseNet.init(shape[0], shape[1], shape[2], act, RngStream(seed))


def _log_pi(net, x, a):
    return float(np.log(class_probs(net, x)[2][0, a]))


@pytest.mark.parametrize("act", list(Activation))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_policy_gradient_matches_finite_differences(act, seed):
    net = _net(act, seed)
    # push weights away from zero so ReLU kinks are not straddled by the step
    g = np.random.default_rng(seed)
    net = net.with_params([p + g.normal(size=p.shape) for p in net.params()])
    x = g.random(4)
    tr = dense_forward(net, x, RngStream(seed, 1))
    a = int(tr.actions[0])
    R = 0.7
    grads = dense_policy_gradient(net, tr, R)
    h = 1e-5
    params = net.params()
    for i, p in enumerate(params):
        for pos in np.ndindex(p.shape):
            up = [q.copy() for q in params]
            dn = [q.copy() for q in params]
            up[i][pos] += h
            dn[i][pos] -= h
            fd = (_log_pi(net.with_params(up), x, a) - _log_pi(net.with_params(dn), x, a)) / (2 * h) * R
            assert grads[i][pos] == pytest.approx(fd, abs=1e-5)


def test_zero_weights_uniform():
    net = _net(Activation.TANH)
    net = net.with_params([np.zeros_like(p) for p in net.params()])
    np.testing.assert_allclose(class_probs(net, np.ones(4))[2], [[1 / 3] * 3])


def test_relu_negative_is_exact_zero_and_tanh_bounded():
    assert Activation.RELU(np.array([-3.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert Activation.RELU.derivative(np.array([0.0]), np.array([0.0]))[0] == 0.0
    out = Activation.TANH(np.array([-50.0, 0.3, 50.0]))
    assert np.all(np.abs(out) <= 1.0)
    assert np.all(np.abs(out[1:2]) < 1.0)


def test_zero_reward_zero_gradient():
    net = _net(Activation.RELU)
    tr = dense_forward(net, np.random.default_rng(0).random((5, 4)), RngStream(0))
    for g in dense_policy_gradient(net, tr, 0.0):
        assert np.all(g == 0.0)


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_head_gradient_is_onehot_minus_p(seed):
    net = _net(Activation.TANH, seed % 1000)
    x = np.random.default_rng(seed).random(4)
    tr = dense_forward(net, x, RngStream(seed))
    grads = dense_policy_gradient(net, tr, 1.0)
    expect = np.eye(3)[tr.actions[0]] - tr.probs[0]
    np.testing.assert_allclose(grads[-1], expect, atol=1e-15)


def test_head_gradient_equals_softmax_backward():
    net = _net(Activation.SIGMOID, 4)
    tr = dense_forward(net, np.random.default_rng(1).random(4), RngStream(2))
    h = tr.acts[-1][0]
    state = SoftmaxUnitState(h, h @ net.head.weights.T + net.head.bias, tr.probs[0], int(tr.actions[0]))
    _, _, ref = softmax_backward(state, net.head, 0.9, 0.0)
    grads = dense_policy_gradient(net, tr, 0.9)
    np.testing.assert_allclose(grads[-2], ref.weights, atol=1e-15)
    np.testing.assert_allclose(grads[-1], ref.bias, atol=1e-15)


def test_chaining_validation():
    good = DenseLayer(np.zeros((3, 4)), np.zeros(3), Activation.TANH)
    with pytest.raises(TopologyError):
        DenseNet([good], UnitParams(np.zeros((2, 5)), np.zeros(2)))
    with pytest.raises(ValueError):
        DenseNet([DenseLayer(np.full((3, 4), np.inf), np.zeros(3), Activation.TANH)],
                 UnitParams(np.zeros((2, 3)), np.zeros(2)))


def test_forward_dimension_mismatch():
    with pytest.raises(TopologyError):
        dense_forward(_net(Activation.TANH), np.ones(5), RngStream(0))


def test_uniform_array_drives_sample():
    net = _net(Activation.TANH)
    X = np.random.default_rng(0).random((4, 4))
    p = class_probs(net, X)[2]
    tr = dense_forward(net, X, np.zeros((4, 2)))
    assert np.all(tr.actions == 0)
    tr = dense_forward(net, X, np.full((4, 1), 0.999999))
    np.testing.assert_array_equal(tr.actions, np.argmax(np.cumsum(p, axis=1) > 0.999999, axis=1))
    assert dense_greedy_actions(net, X).tolist() == np.argmax(p, axis=1).tolist()
