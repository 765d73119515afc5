"""Model specs, parameter storage and the forward/backward runner."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from qahfl.nn.layers import BatchNorm, Context, Layer, Residual


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[Layer, ...]
    feature_index: int
    feature_dim: int
    l2_lambda: float = 0.0
    dropout: float = 0.0
    input_shape: tuple[int, ...] = (28, 28, 1)
    n_classes: int = 10

    def describe(self) -> str:
        return " -> ".join(layer.describe() for layer in self.layers)


@dataclass(frozen=True)
class Entry:
    name: str
    shape: tuple[int, ...]
    offset: int
    buffer: bool = False

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass(frozen=True)
class Manifest:
    params: tuple[Entry, ...]
    buffers: tuple[Entry, ...]
    n_params: int
    n_buffers: int
    activation_sizes: tuple[int, ...]


def _walk(layers, prefix, shape, params, buffers, acts):
    for i, layer in enumerate(layers):
        key = f"{prefix}{i}."
        if isinstance(layer, Residual):
            out = _walk(layer.body, key, shape, params, buffers, acts)
            if out != shape:
                raise ValueError(f"residual body at {key} maps {shape} to {out}")
        else:
            params.extend((key + n, s) for n, s in layer.param_shapes(shape))
            buffers.extend((key + n, s) for n, s in layer.buffer_shapes(shape))
            shape = layer.out_shape(shape)
        acts.append(int(np.prod(shape)))
    return shape


def _pack(named, buffer):
    entries, offset = [], 0
    for name, shape in named:
        e = Entry(name, tuple(shape), offset, buffer)
        entries.append(e)
        offset += e.size
    return tuple(entries), offset


@lru_cache(maxsize=None)
def manifest(spec: ModelSpec) -> Manifest:
    params, buffers, acts = [], [], []
    out = _walk(spec.layers, "", tuple(spec.input_shape), params, buffers, acts)
    if out != (spec.n_classes,):
        raise ValueError(f"{spec.name}: network ends in {out}, expected ({spec.n_classes},)")
    p_entries, n_p = _pack(params, False)
    b_entries, n_b = _pack(buffers, True)
    return Manifest(p_entries, b_entries, n_p, n_b, tuple(acts))


def param_count(spec: ModelSpec) -> int:
    return manifest(spec).n_params


def views_of(flat: np.ndarray, entries) -> dict[str, np.ndarray]:
    return {e.name: flat[e.offset : e.offset + e.size].reshape(e.shape) for e in entries}


@dataclass
class ModelParams:
    spec: ModelSpec
    flat: np.ndarray
    buffers: np.ndarray = field(default=None)

    def __post_init__(self):
        m = manifest(self.spec)
        if self.flat.shape != (m.n_params,):
            raise ValueError(f"{self.spec.name}: expected {m.n_params} params, got {self.flat.shape}")
        if self.buffers is None:
            self.buffers = np.zeros(m.n_buffers, dtype=self.flat.dtype)

    @property
    def param_count(self) -> int:
        return self.flat.size

    @property
    def dtype(self):
        return self.flat.dtype

    def views(self) -> dict[str, np.ndarray]:
        return views_of(self.flat, manifest(self.spec).params)

    def buffer_views(self) -> dict[str, np.ndarray]:
        return views_of(self.buffers, manifest(self.spec).buffers)

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, self.flat.copy(), self.buffers.copy())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.spec, self.flat.astype(dtype), self.buffers.astype(dtype))


def init_params(spec: ModelSpec, rng: np.random.Generator, dtype=np.float64) -> ModelParams:
    m = manifest(spec)
    params = ModelParams(spec, np.zeros(m.n_params, dtype=dtype), np.zeros(m.n_buffers, dtype=dtype))
    pv, bv = params.views(), params.buffer_views()

    def init(layers, prefix):
        for i, layer in enumerate(layers):
            key = f"{prefix}{i}."
            if isinstance(layer, Residual):
                init(layer.body, key)
            else:
                layer.init(_Scoped(pv, key), _Scoped(bv, key), rng)

    init(spec.layers, "")
    return params


def mean_params(models: list[ModelParams]) -> ModelParams:
    """Parameter-space mean (buffers included)."""
    if not models:
        raise ValueError("cannot average zero models")
    spec = models[0].spec
    flat = np.mean([m.flat for m in models], axis=0).astype(models[0].dtype)
    buffers = np.mean([m.buffers for m in models], axis=0).astype(models[0].dtype)
    return ModelParams(spec, flat, buffers)


class _Scoped:
    """Dict-like view that prepends a layer prefix to short parameter names."""

    __slots__ = ("_d", "_prefix")

    def __init__(self, d, prefix):
        self._d = d
        self._prefix = prefix

    def __getitem__(self, name):
        return self._d[self._prefix + name]

    def __setitem__(self, name, value):
        # `g["W"] += ...` already updated the view in place
        target = self._d[self._prefix + name]
        if value is not target:
            target[...] = value


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _run(layers, x, prefix, pv, bv, ctx, caches):
    for i, layer in enumerate(layers):
        key = f"{prefix}{i}."
        if isinstance(layer, Residual):
            sub: list = []
            x = _run(layer.body, x, key, pv, bv, ctx, sub) + x
            caches.append(sub)
        else:
            x, cache = layer.forward(x, _Scoped(pv, key), _Scoped(bv, key), ctx)
            caches.append(cache)
    return x


def _run_back(layers, dy, prefix, pv, gv, caches, first_needs_dx=True):
    for i in range(len(layers) - 1, -1, -1):
        layer, key = layers[i], f"{prefix}{i}."
        need_dx = first_needs_dx or i > 0
        if isinstance(layer, Residual):
            dy = _run_back(layer.body, dy, key, pv, gv, caches[i]) + dy
        else:
            dy = layer.backward(dy, caches[i], _Scoped(pv, key), _Scoped(gv, key), need_dx)
    return dy


def _check_batch(spec: ModelSpec, batch: np.ndarray, dtype) -> np.ndarray:
    x = np.asarray(batch, dtype=dtype)
    shape = tuple(spec.input_shape)
    if x.shape[1:] == shape:
        return x
    if len(shape) == 3 and shape[-1] == 1 and x.shape[1:] == shape[:2]:
        return x[..., None]
    raise ValueError(f"{spec.name}: batch shape {x.shape} does not match input {shape}")


def _forward_cached(params: ModelParams, batch, mode, rng):
    spec = params.spec
    x = _check_batch(spec, batch, params.dtype)
    ctx = Context(mode=mode, rng=rng)
    pv, bv = params.views(), params.buffer_views()
    caches: list = []
    features = None
    for i, layer in enumerate(spec.layers):
        key = f"{i}."
        if isinstance(layer, Residual):
            sub: list = []
            x = _run(layer.body, x, key, pv, bv, ctx, sub) + x
            caches.append(sub)
        else:
            x, cache = layer.forward(x, _Scoped(pv, key), _Scoped(bv, key), ctx)
            caches.append(cache)
        if i == spec.feature_index:
            features = x
    return x, features, caches, pv


def forward(params: ModelParams, batch, mode: str = "eval", rng: np.random.Generator | None = None):
    """Return ``(logits, features)`` for a batch of images or vectors."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, features, _, _ = _forward_cached(params, batch, mode, rng)
    return logits, features


def _has_batchnorm(layers) -> bool:
    return any(isinstance(l, BatchNorm) or (isinstance(l, Residual) and _has_batchnorm(l.body)) for l in layers)


def recalibrate_batchnorm(params: ModelParams, images, batch_size: int = 32) -> ModelParams:
    """Re-estimate BatchNorm running statistics for the current weights, in place.

    Counters restart at zero, so for fewer than ~100 batches the buffers hold
    the plain average of per-batch statistics.  Dropout is off during the pass.
    """
    spec = params.spec
    if not _has_batchnorm(spec.layers) or len(images) == 0:
        return params
    for name, view in params.buffer_views().items():
        if name.endswith(".count"):
            view[...] = 0.0
    no_dropout = np.random.default_rng(0)
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        if len(chunk) < 2:
            break
        x = _check_batch(spec, chunk, params.dtype)
        ctx = Context(mode="train", rng=no_dropout)
        pv, bv = params.views(), params.buffer_views()
        for i, layer in enumerate(spec.layers):
            key = f"{i}."
            if isinstance(layer, Residual):
                x = _run(layer.body, x, key, pv, bv, ctx, []) + x
            elif layer.kind == "dropout":
                continue
            else:
                x, _ = layer.forward(x, _Scoped(pv, key), _Scoped(bv, key), ctx)
    return params


def extract_features(params: ModelParams, images, batch_size: int = 256) -> np.ndarray:
    """Eval-mode feature vectors for a stack of images, in chunks."""
    out = []
    for start in range(0, len(images), batch_size):
        _, f = forward(params, images[start : start + batch_size], "eval")
        out.append(f)
    if not out:
        return np.zeros((0, params.spec.feature_dim), dtype=params.dtype)
    return np.concatenate(out)


def predict_logits(params: ModelParams, images, batch_size: int = 256) -> np.ndarray:
    out = [forward(params, images[s : s + batch_size], "eval")[0] for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.spec.n_classes))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    return float(-lp[np.arange(len(labels)), labels].mean())


def _flat(p) -> np.ndarray:
    return p.flat if isinstance(p, ModelParams) else np.asarray(p)


def loss_fedprox(logits, labels, params, prev_params, mu: float, l2: float) -> float:
    """CE + (mu/2)||params - prev||^2 + l2 ||params||^2."""
    if mu < 0 or l2 < 0:
        raise ValueError("mu and l2 must be non-negative")
    theta = _flat(params).astype(np.float64)
    loss = cross_entropy(logits, labels)
    if mu and prev_params is not None:
        delta = theta - _flat(prev_params)
        loss += 0.5 * mu * float(delta @ delta)
    if l2:
        loss += l2 * float(theta @ theta)
    return loss


def loss_and_grad(params: ModelParams, batch, labels, prev_params=None, mu: float = 0.0, l2: float = 0.0, rng=None):
    """Train-mode forward + exact reverse-mode gradient of :func:`loss_fedprox`."""
    labels = np.asarray(labels)
    logits, _, caches, pv = _forward_cached(params, batch, "train", rng)
    if logits.shape != (len(labels), params.spec.n_classes):
        raise ValueError(f"logits {logits.shape} do not match {len(labels)} labels")
    loss = loss_fedprox(logits, labels, params, prev_params, mu, l2)

    dlogits = softmax(logits)
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits /= len(labels)

    grad = np.zeros_like(params.flat)
    gv = views_of(grad, manifest(params.spec).params)
    _run_back(params.spec.layers, dlogits.astype(params.dtype), "", pv, gv, caches, first_needs_dx=False)
    if mu and prev_params is not None:
        grad += mu * (params.flat - _flat(prev_params))
    if l2:
        grad += 2.0 * l2 * params.flat
    return loss, grad, logits


def backward(params: ModelParams, batch, labels, prev_params=None, mu: float = 0.0, l2: float = 0.0, rng=None):
    return loss_and_grad(params, batch, labels, prev_params, mu, l2, rng)[1]


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float, momentum_state: np.ndarray, momentum: float = 0.9):
    """Classical momentum, in place: v = m v + g; params -= lr v."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    momentum_state *= momentum
    momentum_state += grad
    params -= lr * momentum_state
    return params


def activation_bytes(spec: ModelSpec, batch_size: int, itemsize: int = 4) -> int:
    m = manifest(spec)
    largest = max(m.activation_sizes + (int(np.prod(spec.input_shape)),))
    return largest * batch_size * itemsize


# ---------------------------------------------------------------------------
# Serialization: header + float32 little-endian payload
# ---------------------------------------------------------------------------

MAGIC = b"QHFM"
VERSION = 1


class CorruptModelError(ValueError):
    pass


def serialize(params: ModelParams) -> bytes:
    m = manifest(params.spec)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(m.params) + len(m.buffers))]
    for e in m.params + m.buffers:
        name = e.name.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<BB", int(e.buffer), len(e.shape)))
        parts.append(struct.pack(f"<{len(e.shape)}I", *e.shape))
        parts.append(struct.pack("<Q", e.offset))
    parts.append(params.flat.astype("<f4").tobytes())
    parts.append(params.buffers.astype("<f4").tobytes())
    return b"".join(parts)


def deserialize(data: bytes, spec: ModelSpec, dtype=np.float32) -> ModelParams:
    if data[:4] != MAGIC:
        raise CorruptModelError("bad model magic")
    version, n_entries = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CorruptModelError(f"unsupported model version {version}")
    pos = 10
    entries = []
    for _ in range(n_entries):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n].decode()
        pos += n
        is_buf, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        entries.append(Entry(name, tuple(shape), offset, bool(is_buf)))
    m = manifest(spec)
    if tuple(entries) != m.params + m.buffers:
        raise CorruptModelError(f"manifest does not match spec {spec.name}")
    payload = np.frombuffer(data, dtype="<f4", offset=pos)
    if payload.size != m.n_params + m.n_buffers:
        raise CorruptModelError("payload length does not match manifest")
    return ModelParams(spec, payload[: m.n_params].astype(dtype), payload[m.n_params :].astype(dtype))
