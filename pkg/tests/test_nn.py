import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qahfl.datasets import synth_digits
from qahfl.nn import (
    ModelParams,
    ModelSpec,
    backward,
    cross_entropy,
    deserialize,
    forward,
    high_spec,
    init_params,
    loss_fedprox,
    low_spec,
    mean_params,
    mid_spec,
    param_count,
    serialize,
    sgd_step,
    softmax,
)
from qahfl.nn.layers import BatchNorm, Conv2D, Dense, Dropout, Flatten, GlobalAvgPool, ReLU, Residual, SqueezeExcite
from qahfl.nn.model import CorruptModelError, loss_and_grad, predict_logits, recalibrate_batchnorm
from qahfl.verify import gradient_error, tiny_spec


def small(layers, feature_index, feature_dim, shape=(8, 8, 1)):
    return ModelSpec("t", tuple(layers), feature_index, feature_dim, input_shape=shape)


LAYER_CASES = {
    "dense": small([Flatten(), Dense(64, 12), ReLU(), Dense(12, 10)], 2, 12),
    "conv_im2col": small([Conv2D(1, 4, 3, stride=2), ReLU(), GlobalAvgPool(), Dense(4, 10)], 2, 4),
    "conv_shifted": small([Conv2D(1, 8, 3, stride=2), Conv2D(8, 8, 3), GlobalAvgPool(), Dense(8, 10)], 2, 8),
    "batchnorm": small([Conv2D(1, 8, 3), BatchNorm(8), ReLU(), GlobalAvgPool(), Dense(8, 10)], 3, 8),
    "residual": small([Conv2D(1, 8, 3, stride=2), Residual((Conv2D(8, 8, 3), ReLU())), GlobalAvgPool(), Dense(8, 10)], 2, 8),
    "squeeze_excite": small([Conv2D(1, 8, 3, stride=2), SqueezeExcite(8, 2), GlobalAvgPool(), Dense(8, 10)], 2, 8),
    "dropout": small([Flatten(), Dense(64, 12), Dropout(0.3), Dense(12, 10)], 2, 12),
    "all_layers": tiny_spec(),
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_finite_differences(name):
    spec = LAYER_CASES[name]
    assert param_count(spec) <= 2000
    assert gradient_error(spec, seed=3, mu=0.05, l2=0.01) <= 1e-4


def test_param_budgets():
    low, mid, high = (param_count(s()) for s in (low_spec, mid_spec, high_spec))
    assert 2500 <= low <= 5000
    assert 90_000 <= mid <= 160_000
    assert 280_000 <= high <= 450_000
    assert high / low >= 50


def test_tier_hyperparameters():
    assert [s().l2_lambda for s in (low_spec, mid_spec, high_spec)] == [0.01, 0.005, 0.001]
    assert [s().dropout for s in (low_spec, mid_spec, high_spec)] == [0.3, 0.25, 0.2]
    assert [s().feature_dim for s in (low_spec, mid_spec, high_spec)] == [16, 32, 64]


def test_dense_param_count():
    assert param_count(small([Flatten(), Dense(16, 10)], 0, 16, shape=(16,))) == 170


@pytest.mark.parametrize("builder", [low_spec, mid_spec, high_spec])
def test_forward_shapes(builder):
    spec = builder()
    p = init_params(spec, np.random.default_rng(0), np.float32)
    x = np.random.default_rng(1).random((3, 28, 28))
    logits, feats = forward(p, x)
    assert logits.shape == (3, 10)
    assert feats.shape == (3, spec.feature_dim)
    again, _ = forward(p, x)
    assert np.array_equal(logits, again)
    assert np.allclose(softmax(logits).sum(axis=1), 1, atol=1e-6)


def test_forward_shape_mismatch():
    p = init_params(low_spec(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(p, np.zeros((2, 27, 28)))


def test_zero_probe_gives_uniform_softmax():
    spec = small([Flatten(), Dense(64, 10)], 0, 64)
    p = ModelParams(spec, np.zeros(param_count(spec)))
    logits, _ = forward(p, np.random.default_rng(0).random((4, 8, 8)))
    assert np.array_equal(logits, np.zeros((4, 10)))
    assert cross_entropy(logits, np.arange(4)) == pytest.approx(math.log(10))


def test_fedprox_loss_values():
    logits = np.array([[50.0, 0, 0, 0, 0, 0, 0, 0, 0, 0]])
    theta = np.array([2.0, 0.0])
    assert loss_fedprox(logits, [0], theta, np.zeros(2), 0.01, 0.0) == pytest.approx(0.02, abs=1e-12)
    ce = cross_entropy(np.zeros((1, 10)), [3])
    assert loss_fedprox(np.zeros((1, 10)), [3], theta, theta, 0.5, 0.1) == pytest.approx(ce + 0.4)


def test_mu_term_gradient():
    spec = LAYER_CASES["dense"]
    p = init_params(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).random((2, 8, 8))
    base = backward(p, x, [1, 2])
    prev = p.flat.copy()
    prev[5] -= 1.0
    with_mu = backward(p, x, [1, 2], prev, mu=0.3)
    assert with_mu[5] - base[5] == pytest.approx(0.3)


def test_zero_input_zero_conv_gradient():
    spec = LAYER_CASES["conv_im2col"]
    p = ModelParams(spec, np.zeros(param_count(spec)))
    g = ModelParams(spec, backward(p, np.zeros((2, 8, 8)), [0, 1])).views()
    assert not np.any(g["0.W"]) and not np.any(g["0.b"])


def test_sgd_step():
    theta = np.ones(3)
    v = np.zeros(3)
    sgd_step(theta, np.zeros(3), 0.1, v)
    assert np.array_equal(theta, np.ones(3))
    g = np.array([1.0, -2.0, 0.5])
    sgd_step(theta, g, 0.1, v, momentum=0.0)
    assert np.allclose(theta, 1 - 0.1 * g)
    theta, v = np.zeros(3), np.zeros(3)
    sgd_step(theta, g, 0.1, v)
    sgd_step(theta, g, 0.1, v)
    assert np.allclose(theta, -0.1 * g * 2.9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cross_entropy_nonnegative(seed):
    r = np.random.default_rng(seed)
    logits = r.normal(0, 5, (6, 10))
    assert cross_entropy(logits, r.integers(0, 10, 6)) >= 0


def test_serialize_roundtrip_and_corruption():
    spec = mid_spec()
    p = init_params(spec, np.random.default_rng(0), np.float32)
    blob = serialize(p)
    q = deserialize(blob, spec)
    assert np.array_equal(p.flat, q.flat) and np.array_equal(p.buffers, q.buffers)
    with pytest.raises(CorruptModelError):
        deserialize(b"XXXX" + blob[4:], spec)
    with pytest.raises(CorruptModelError):
        deserialize(blob, low_spec())


def test_mean_params():
    spec = LAYER_CASES["dense"]
    a = init_params(spec, np.random.default_rng(0))
    b = init_params(spec, np.random.default_rng(1))
    assert np.allclose(mean_params([a, b]).flat, (a.flat + b.flat) / 2)


def test_batchnorm_recalibration_matches_batch_stats():
    spec = LAYER_CASES["batchnorm"]
    p = init_params(spec, np.random.default_rng(0))
    p.flat += np.random.default_rng(4).normal(0, 0.3, p.flat.shape)
    x = np.random.default_rng(2).random((16, 8, 8))
    recalibrate_batchnorm(p, x, batch_size=16)
    # one batch: the running stats are exactly that batch's statistics, so the
    # eval pass reproduces the train pass on it
    train_logits, _ = forward(p.copy(), x, "train", np.random.default_rng(0))
    eval_logits, _ = forward(p, x, "eval")
    assert np.allclose(train_logits, eval_logits, atol=1e-4)
    assert p.buffer_views()["1.count"][0] == 1


def _train_low(seed):
    data = synth_digits(300, np.random.default_rng(100 + seed))
    spec = low_spec()
    p = init_params(spec, np.random.default_rng(seed), np.float32)
    vel = np.zeros_like(p.flat)
    r = np.random.default_rng(seed + 1)
    x = data.images.astype(np.float32)
    for _ in range(2):
        order = r.permutation(300)
        for s in range(0, 300, 8):
            i = order[s : s + 8]
            _, g, _ = loss_and_grad(p, x[i], data.labels[i], None, 0.0, spec.l2_lambda, r)
            sgd_step(p.flat, g, 0.01, vel)
    return float((predict_logits(p, x).argmax(1) == data.labels).mean())


def test_low_tier_learns_in_two_epochs():
    accs = [_train_low(s) for s in range(3)]
    assert np.median(accs) > 0.30, accs
