from qahfl.nn.model import (
    ModelParams,
    ModelSpec,
    backward,
    cross_entropy,
    deserialize,
    extract_features,
    forward,
    init_params,
    loss_and_grad,
    loss_fedprox,
    mean_params,
    param_count,
    serialize,
    sgd_step,
    softmax,
)
from qahfl.nn.specs import high_spec, low_spec, mid_spec, probe_spec, spec_for

__all__ = [
    "ModelParams",
    "ModelSpec",
    "backward",
    "cross_entropy",
    "deserialize",
    "extract_features",
    "forward",
    "high_spec",
    "init_params",
    "loss_and_grad",
    "loss_fedprox",
    "low_spec",
    "mean_params",
    "mid_spec",
    "param_count",
    "probe_spec",
    "serialize",
    "sgd_step",
    "softmax",
    "spec_for",
]
