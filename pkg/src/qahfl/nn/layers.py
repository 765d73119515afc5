"""Layer descriptors with hand-written forward and backward passes.

Tensors are NHWC for images and ``(B, D)`` for vectors.  A layer never owns
its parameters: ``forward``/``backward`` receive dicts of views into a
model-wide flat vector, keyed by the short parameter name (``"W"``, ``"b"``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Context:
    mode: str = "eval"
    rng: np.random.Generator | None = None

    @property
    def training(self) -> bool:
        return self.mode == "train"


class Layer:
    """Stateless descriptor; subclasses override what they need."""

    kind = "layer"

    def param_shapes(self, in_shape) -> list[tuple[str, tuple[int, ...]]]:
        return []

    def buffer_shapes(self, in_shape) -> list[tuple[str, tuple[int, ...]]]:
        return []

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def init(self, p: dict, b: dict, rng: np.random.Generator) -> None:
        pass

    def forward(self, x, p, b, ctx: Context):
        raise NotImplementedError

    def backward(self, dy, cache, p, g, need_dx: bool = True):
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


@dataclass(frozen=True)
class Conv2D(Layer):
    cin: int
    cout: int
    k: int = 3
    stride: int = 1
    pad: int | None = None
    kind = "conv"

    @property
    def padding(self) -> int:
        return self.k // 2 if self.pad is None else self.pad

    def param_shapes(self, in_shape):
        return [("W", (self.k, self.k, self.cin, self.cout)), ("b", (self.cout,))]

    def out_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.cin:
            raise ValueError(f"conv expects {self.cin} channels, got {c}")
        p, k, s = self.padding, self.k, self.stride
        return ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1, self.cout)

    def init(self, p, b, rng):
        p["W"][...] = _he(rng, p["W"].shape, self.k * self.k * self.cin)
        p["b"][...] = 0.0

    def _shifted(self, c: int) -> bool:
        # summing k*k shifted matmuls beats materialising im2col columns once
        # the channel count is large enough to keep BLAS busy
        return self.stride == 1 and c >= 8

    def forward(self, x, p, b, ctx):
        bsz, h, w, c = x.shape
        k, s, pad = self.k, self.stride, self.padding
        ho, wo, _ = self.out_shape((h, w, c))
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        if self._shifted(c):
            y = np.zeros((bsz, ho, wo, self.cout), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    y += xp[:, i : i + ho, j : j + wo, :] @ p["W"][i, j]
            return y + p["b"], (xp, x.shape)
        cols = np.empty((bsz, ho, wo, k, k, c), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i : i + s * ho : s, j : j + s * wo : s, :]
        cols = cols.reshape(bsz * ho * wo, k * k * c)
        y = cols @ p["W"].reshape(k * k * c, self.cout) + p["b"]
        return y.reshape(bsz, ho, wo, self.cout), (cols, x.shape)

    def backward(self, dy, cache, p, g, need_dx=True):
        data, in_shape = cache
        bsz, h, w, c = in_shape
        k, s, pad = self.k, self.stride, self.padding
        _, ho, wo, _ = dy.shape
        dyf = dy.reshape(-1, self.cout)
        g["b"] += dyf.sum(axis=0)
        if self._shifted(c):
            xp = data
            for i in range(k):
                for j in range(k):
                    g["W"][i, j] += xp[:, i : i + ho, j : j + wo, :].reshape(-1, c).T @ dyf
            if not need_dx:
                return None
            dxp = np.zeros(xp.shape, dtype=dy.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + ho, j : j + wo, :] += dy @ p["W"][i, j].T
        else:
            cols = data
            g["W"] += (cols.T @ dyf).reshape(g["W"].shape)
            if not need_dx:
                return None
            dcols = (dyf @ p["W"].reshape(k * k * c, self.cout).T).reshape(bsz, ho, wo, k, k, c)
            dxp = np.zeros((bsz, h + 2 * pad, w + 2 * pad, c), dtype=dy.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, pad : pad + h, pad : pad + w, :] if pad else dxp

    def describe(self):
        return f"conv({self.cout},{self.k}x{self.k},s{self.stride})"


@dataclass(frozen=True)
class Dense(Layer):
    din: int
    dout: int
    kind = "dense"

    def param_shapes(self, in_shape):
        return [("W", (self.din, self.dout)), ("b", (self.dout,))]

    def out_shape(self, in_shape):
        if in_shape != (self.din,):
            raise ValueError(f"dense expects ({self.din},), got {in_shape}")
        return (self.dout,)

    def init(self, p, b, rng):
        p["W"][...] = _he(rng, p["W"].shape, self.din)
        p["b"][...] = 0.0

    def forward(self, x, p, b, ctx):
        return x @ p["W"] + p["b"], x

    def backward(self, dy, x, p, g, need_dx=True):
        g["W"] += x.T @ dy
        g["b"] += dy.sum(axis=0)
        return dy @ p["W"].T if need_dx else None

    def describe(self):
        return f"dense({self.dout})"


@dataclass(frozen=True)
class ReLU(Layer):
    kind = "relu"

    def forward(self, x, p, b, ctx):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask, p, g, need_dx=True):
        return dy * mask


@dataclass(frozen=True)
class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, p, b, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape, p, g, need_dx=True):
        return dy.reshape(shape)


@dataclass(frozen=True)
class GlobalAvgPool(Layer):
    kind = "gap"

    def out_shape(self, in_shape):
        return (in_shape[-1],)

    def forward(self, x, p, b, ctx):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dy, shape, p, g, need_dx=True):
        _, h, w, _ = shape
        return np.broadcast_to(dy[:, None, None, :] / (h * w), shape).copy()


@dataclass(frozen=True)
class Dropout(Layer):
    rate: float
    kind = "dropout"

    def forward(self, x, p, b, ctx):
        if not ctx.training or self.rate == 0:
            return x, None
        rng = ctx.rng if ctx.rng is not None else np.random.default_rng(0)
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * mask, mask

    def backward(self, dy, mask, p, g, need_dx=True):
        return dy if mask is None else dy * mask

    def describe(self):
        return f"dropout({self.rate})"


@dataclass(frozen=True)
class BatchNorm(Layer):
    channels: int
    momentum: float = 0.99
    eps: float = 1e-5
    kind = "batchnorm"

    def param_shapes(self, in_shape):
        return [("gamma", (self.channels,)), ("beta", (self.channels,))]

    def buffer_shapes(self, in_shape):
        return [("mean", (self.channels,)), ("var", (self.channels,)), ("count", (1,))]

    def init(self, p, b, rng):
        p["gamma"][...] = 1.0
        p["beta"][...] = 0.0
        b["mean"][...] = 0.0
        b["var"][...] = 1.0
        b["count"][...] = 0.0

    def forward(self, x, p, b, ctx):
        axes = tuple(range(x.ndim - 1))
        if ctx.training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            # cumulative average for the first steps, EMA afterwards
            t = float(b["count"][0])
            m = min(self.momentum, t / (t + 1.0))
            b["mean"][...] = m * b["mean"] + (1 - m) * mean
            b["var"][...] = m * b["var"] + (1 - m) * var
            b["count"][...] = t + 1.0
        else:
            mean, var = b["mean"], b["var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        return xhat * p["gamma"] + p["beta"], (xhat, inv_std, ctx.training)

    def backward(self, dy, cache, p, g, need_dx=True):
        xhat, inv_std, training = cache
        axes = tuple(range(dy.ndim - 1))
        g["gamma"] += (dy * xhat).sum(axis=axes)
        g["beta"] += dy.sum(axis=axes)
        if not need_dx:
            return None
        dxhat = dy * p["gamma"]
        if not training:
            return dxhat * inv_std
        n = dy.size // dy.shape[-1]
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        return inv_std / n * (n * dxhat - s1 - xhat * s2)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class SqueezeExcite(Layer):
    """Channel gating: x * sigmoid(W2 relu(W1 mean_hw(x)))."""

    channels: int
    reduction: int = 4
    kind = "se"

    @property
    def hidden(self) -> int:
        return max(1, self.channels // self.reduction)

    def param_shapes(self, in_shape):
        c, r = self.channels, self.hidden
        return [("W1", (c, r)), ("b1", (r,)), ("W2", (r, c)), ("b2", (c,))]

    def init(self, p, b, rng):
        p["W1"][...] = _he(rng, p["W1"].shape, self.channels)
        p["b1"][...] = 0.0
        p["W2"][...] = rng.normal(0.0, 1.0 / math.sqrt(self.hidden), size=p["W2"].shape)
        p["b2"][...] = 0.0

    def forward(self, x, p, b, ctx):
        s = x.mean(axis=(1, 2))
        a1 = s @ p["W1"] + p["b1"]
        z = np.maximum(a1, 0)
        gate = _sigmoid(z @ p["W2"] + p["b2"])
        return x * gate[:, None, None, :], (x, s, a1, z, gate)

    def backward(self, dy, cache, p, g, need_dx=True):
        x, s, a1, z, gate = cache
        _, h, w, _ = x.shape
        dgate = (dy * x).sum(axis=(1, 2))
        da2 = dgate * gate * (1 - gate)
        g["W2"] += z.T @ da2
        g["b2"] += da2.sum(axis=0)
        da1 = (da2 @ p["W2"].T) * (a1 > 0)
        g["W1"] += s.T @ da1
        g["b1"] += da1.sum(axis=0)
        if not need_dx:
            return None
        ds = da1 @ p["W1"].T
        return dy * gate[:, None, None, :] + ds[:, None, None, :] / (h * w)

    def describe(self):
        return f"se({self.channels}/{self.reduction})"


@dataclass(frozen=True)
class Residual(Layer):
    """``body(x) + x``; the body must preserve shape."""

    body: tuple[Layer, ...] = field(default_factory=tuple)
    kind = "residual"

    def describe(self):
        return "residual[" + ",".join(layer.describe() for layer in self.body) + "]"
