"""The three per-tier architectures plus dense probes.

Both stride-2 stems bring 28x28 inputs to 7x7 before the wide layers, which
keeps a numpy forward/backward affordable.  Wider kernels inside the
residual blocks supply the parameter budget that a global-average-pooled
head cannot.
"""

from __future__ import annotations

from qahfl.imaging import QualityTier
from qahfl.nn.layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    ReLU,
    Residual,
    SqueezeExcite,
)
from qahfl.nn.model import ModelSpec


def low_spec() -> ModelSpec:
    layers = (
        Conv2D(1, 8, 3, stride=2),
        ReLU(),
        Conv2D(8, 16, 5, stride=2),
        ReLU(),
        GlobalAvgPool(),
        Dense(16, 16),
        ReLU(),
        Dropout(0.3),
        Dense(16, 10),
    )
    return ModelSpec("low", layers, feature_index=6, feature_dim=16, l2_lambda=0.01, dropout=0.3)


def mid_spec() -> ModelSpec:
    block = Residual((Conv2D(32, 32, 7), BatchNorm(32), ReLU(), Conv2D(32, 32, 7), BatchNorm(32)))
    layers = (
        Conv2D(1, 16, 3, stride=2),
        BatchNorm(16),
        ReLU(),
        Conv2D(16, 32, 3, stride=2),
        BatchNorm(32),
        ReLU(),
        block,
        ReLU(),
        GlobalAvgPool(),
        Dense(32, 32),
        ReLU(),
        Dropout(0.25),
        Dense(32, 10),
    )
    return ModelSpec("mid", layers, feature_index=10, feature_dim=32, l2_lambda=0.005, dropout=0.25)


def _high_block() -> Residual:
    return Residual((Conv2D(64, 64, 5), BatchNorm(64), ReLU(), Conv2D(64, 64, 3), BatchNorm(64)))


def high_spec() -> ModelSpec:
    layers = (
        Conv2D(1, 32, 3, stride=2),
        BatchNorm(32),
        ReLU(),
        Conv2D(32, 64, 3, stride=2),
        BatchNorm(64),
        ReLU(),
        _high_block(),
        ReLU(),
        _high_block(),
        ReLU(),
        SqueezeExcite(64, 4),
        GlobalAvgPool(),
        Dense(64, 64),
        ReLU(),
        Dropout(0.2),
        Dense(64, 10),
    )
    return ModelSpec("high", layers, feature_index=13, feature_dim=64, l2_lambda=0.001, dropout=0.2)


_BUILDERS = {QualityTier.LOW: low_spec, QualityTier.MEDIUM: mid_spec, QualityTier.HIGH: high_spec}


def spec_for(tier, hierarchical: bool = True) -> ModelSpec:
    """Architecture for a tier; with ``hierarchical=False`` every tier gets the low model."""
    tier = QualityTier.parse(tier)
    return _BUILDERS[tier if hierarchical else QualityTier.LOW]()


def probe_spec(input_dim: int = 784, hidden: int = 64, n_classes: int = 10) -> ModelSpec:
    """Flatten -> dense(hidden) -> relu -> dense(classes); features are the hidden layer."""
    layers = (Flatten(), Dense(input_dim, hidden), ReLU(), Dense(hidden, n_classes))
    shape = (28, 28, 1) if input_dim == 784 else (input_dim,)
    return ModelSpec("probe", layers, feature_index=2, feature_dim=hidden, input_shape=shape, n_classes=n_classes)
