"""Self-checks run by ``qahfl verify``: gradients, epsilon math, secure-sum exactness."""

from __future__ import annotations

import math

import numpy as np

from qahfl.nn.layers import BatchNorm, Conv2D, Dense, Dropout, GlobalAvgPool, ReLU, Residual, SqueezeExcite
from qahfl.nn.model import ModelParams, ModelSpec, forward, init_params, loss_and_grad, loss_fedprox
from qahfl.privacy import round_epsilon
from qahfl.secagg import encode_fixed, fixed_sum, secure_sum, SecureAggregationAborted


def tiny_spec() -> ModelSpec:
    """Every layer type in well under 2k parameters."""
    body = (Conv2D(8, 8, 3), BatchNorm(8), ReLU(), Conv2D(8, 8, 3))
    layers = (
        Conv2D(1, 8, 3, stride=2),
        BatchNorm(8),
        ReLU(),
        Residual(body),
        SqueezeExcite(8, 2),
        GlobalAvgPool(),
        Dense(8, 6),
        ReLU(),
        Dropout(0.3),
        Dense(6, 10),
    )
    return ModelSpec("tiny", layers, feature_index=7, feature_dim=6, input_shape=(8, 8, 1))


def gradient_error(spec: ModelSpec, seed: int = 0, mu: float = 0.1, l2: float = 0.01, n_check: int = 80) -> float:
    """Worst relative gap between backprop and central differences (float64)."""
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng)
    params.flat += rng.normal(0.0, 0.05, params.flat.shape)
    prev = params.flat + rng.normal(0.0, 0.1, params.flat.shape)
    x = rng.random((4,) + tuple(spec.input_shape))
    y = rng.integers(0, spec.n_classes, 4)

    def loss(theta):
        q = ModelParams(spec, theta, params.buffers.copy())
        logits, _ = forward(q, x, "train", np.random.default_rng(7))
        return loss_fedprox(logits, y, theta, prev, mu, l2)

    _, grad, _ = loss_and_grad(params.copy(), x, y, prev, mu, l2, np.random.default_rng(7))
    h = 1e-5
    worst = 0.0
    for i in rng.choice(params.flat.size, min(n_check, params.flat.size), replace=False):
        t = params.flat.copy()
        t[i] += h
        up = loss(t)
        t[i] -= 2 * h
        num = (up - loss(t)) / (2 * h)
        worst = max(worst, abs(num - grad[i]) / max(1e-8, abs(num) + abs(grad[i])))
    return worst


def check_gradients():
    err = gradient_error(tiny_spec())
    return err <= 1e-4, f"max relative error {err:.2e}"


def check_epsilon():
    got = round_epsilon(200, 1.1, 1e-5)
    want = 2 * math.sqrt(2 * math.log(1.25e5)) / 220
    ordered = round_epsilon(300, 1.1, 1e-5) > round_epsilon(300, 1.3, 1e-5) > round_epsilon(300, 1.5, 1e-5)
    return abs(got - want) <= 1e-12 * want and ordered, f"eps(200, 1.1) = {got:.6f}"


def check_secure_sum():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(10, 30))
        vecs = [rng.uniform(-1, 1, 64) for _ in range(n)]
        k = int(rng.integers(0, math.floor(0.3 * n) + 1))
        dropped = set(rng.choice(n, k, replace=False).tolist())
        plain = fixed_sum([encode_fixed(v) for i, v in enumerate(vecs) if i not in dropped])
        if not np.array_equal(secure_sum(vecs, dropped, rng=rng), plain):
            return False, "masked sum differs from plain sum"
    try:
        secure_sum([np.zeros(4)] * 10, {0, 1, 2, 3}, rng=rng)
    except SecureAggregationAborted:
        return True, "20 trials exact, abort above tolerance"
    return False, "no abort with 40% dropout"


CHECKS = (("gradients", check_gradients), ("epsilon", check_epsilon), ("secure_sum", check_secure_sum))


def run_checks():
    return [(name, *fn()) for name, fn in CHECKS]
