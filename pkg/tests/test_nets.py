import math

import numpy as np
import pytest

from app.errors import DimensionError, TrainingFault
from app.services.nets import (MLP, AdamState, ResNet, adam_step, flatten_params, param_count,
                               unflatten_params)


def _fd_param_grad(net, x, u, key, eps=1e-6):
    grad = np.zeros_like(net.params[key])
    for idx in np.ndindex(grad.shape):
        saved = net.params[key][idx]
        net.params[key][idx] = saved + eps
        plus = np.sum(u * net(x))
        net.params[key][idx] = saved - eps
        minus = np.sum(u * net(x))
        net.params[key][idx] = saved
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def test_mlp_single_and_batch_agree():
    net = MLP([3, 5, 2], rng=np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 3))
    batch = net(x)
    assert batch.shape == (4, 2)
    for i in range(4):
        np.testing.assert_allclose(net(x[i]), batch[i], rtol=0, atol=1e-14)


def test_mlp_parameters_match_widths():
    net = MLP([3, 5, 2])
    assert net.params['l0.w'].shape == (5, 3)
    assert net.params['l1.w'].shape == (2, 5)
    assert net.param_count() == 3 * 5 + 5 + 5 * 2 + 2


def test_mlp_rejects_params_that_do_not_compose():
    params = MLP([3, 5, 2]).params
    params['l1.w'] = np.zeros((2, 4))
    with pytest.raises(DimensionError) as info:
        MLP([3, 5, 2], params=params)
    assert info.value.layer == 1


def test_mlp_rejects_wrong_input_width():
    with pytest.raises(DimensionError):
        MLP([3, 4, 1])(np.zeros(2))


@pytest.mark.parametrize('activation', ['tanh', 'relu'])
def test_resnet_vjp_matches_finite_differences(activation):
    net = ResNet(3, 6, 2, n_blocks=2, activation=activation, rng=np.random.default_rng(2))
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    u = rng.normal(size=(5, 2))
    grads, grad_x = net.vjp(x, u)
    for key in ('in.w', 'blk1.w1', 'blk0.b2', 'out.w'):
        np.testing.assert_allclose(grads[key], _fd_param_grad(net, x, u, key), rtol=1e-5, atol=1e-7)

    eps = 1e-6
    fd_x = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        step = np.zeros_like(x)
        step[idx] = eps
        fd_x[idx] = (np.sum(u * net(x + step)) - np.sum(u * net(x - step))) / (2 * eps)
    np.testing.assert_allclose(grad_x, fd_x, rtol=1e-5, atol=1e-7)


def test_batch_vjp_sums_parameter_gradients():
    net = MLP([2, 4, 3], rng=np.random.default_rng(4))
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 2))
    u = rng.normal(size=(3, 3))
    batch_grads, _ = net.vjp(x, u)
    summed = None
    for i in range(3):
        g, _ = net.vjp(x[i], u[i])
        summed = g if summed is None else {k: summed[k] + g[k] for k in g}
    for key in batch_grads:
        np.testing.assert_allclose(batch_grads[key], summed[key], atol=1e-12)


def test_zero_output_layer_starts_at_zero():
    net = ResNet(4, 8, 2, rng=np.random.default_rng(0), zero_output=True)
    np.testing.assert_array_equal(net(np.ones(4)), np.zeros(2))


def test_flatten_unflatten_keeps_order_and_shapes():
    params = MLP([2, 3, 1]).params
    keys = ['l1.w', 'l0.b']
    flat = flatten_params(params, keys)
    assert flat.size == param_count(params, keys)
    back = unflatten_params(flat, params, keys)
    np.testing.assert_array_equal(back['l1.w'], params['l1.w'])
    np.testing.assert_array_equal(back['l0.b'], params['l0.b'])
    with pytest.raises(DimensionError):
        unflatten_params(np.zeros(flat.size + 1), params, keys)


def test_adam_updates_only_keys_with_gradients():
    params = {'a': np.ones(3), 'b': np.ones(2)}
    state, new = adam_step(AdamState(lr=0.1), params, {'a': np.array([1.0, -1.0, 0.0])})
    np.testing.assert_array_equal(new['b'], params['b'])
    # the first bias-corrected step moves each coordinate by lr·sign(g)
    np.testing.assert_allclose(new['a'], [0.9, 1.1, 1.0], atol=1e-6)
    assert state.t == 1 and 'b' not in state.m


def test_adam_rejects_non_finite_gradients():
    with pytest.raises(TrainingFault):
        adam_step(AdamState(), {'a': np.ones(2)}, {'a': np.array([np.nan, 0.0])})


def _randomized(params, seed):
    rng = np.random.default_rng(seed)
    return {k: v + 0.2 * rng.standard_normal(v.shape) for k, v in params.items()}


def _dense(w, b, x):
    out = []
    for i in range(len(b)):
        total = float(b[i])
        for j in range(len(x)):
            total += float(w[i][j]) * x[j]
        out.append(total)
    return out


def test_mlp_forward_matches_a_scalar_loop():
    params = _randomized(MLP([3, 5, 2], rng=np.random.default_rng(42)).params, 1)
    net = MLP([3, 5, 2], params=params)
    x = [0.3, -1.2, 0.7]
    h = [math.tanh(v) for v in _dense(params['l0.w'], params['l0.b'], x)]
    expected = _dense(params['l1.w'], params['l1.b'], h)
    np.testing.assert_allclose(net.forward(np.array(x)), expected, rtol=1e-12, atol=1e-14)


def test_resnet_forward_matches_a_scalar_loop():
    params = _randomized(ResNet(3, 8, 2, n_blocks=2, rng=np.random.default_rng(42)).params, 2)
    net = ResNet(3, 8, 2, n_blocks=2, params=params)
    x = [0.5, 0.1, -0.4]
    h = [math.tanh(v) for v in _dense(params['in.w'], params['in.b'], x)]
    for i in range(2):
        u = [math.tanh(v) for v in _dense(params[f'blk{i}.w1'], params[f'blk{i}.b1'], h)]
        h = [hk + dk for hk, dk in zip(h, _dense(params[f'blk{i}.w2'], params[f'blk{i}.b2'], u))]
    expected = _dense(params['out.w'], params['out.b'], h)
    np.testing.assert_allclose(net.forward(np.array(x)), expected, rtol=1e-12, atol=1e-14)


def test_adam_finds_the_minimum_of_a_parabola():
    state, params = AdamState(lr=0.1), {'theta': np.array([0.0])}
    for _ in range(500):
        state, params = adam_step(state, params, {'theta': 2.0 * (params['theta'] - 3.0)})
    assert abs(params['theta'][0] - 3.0) < 1e-3
