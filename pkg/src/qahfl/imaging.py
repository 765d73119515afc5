"""Quality-degradation transforms and PSNR.

All transforms accept a single image of shape ``(H, W)`` or a stack of
images ``(..., H, W)`` with intensities in ``[0, 1]``.  Every transform
returns a new array of the same shape, clipped back into ``[0, 1]``.

The resampling and blur operators are expressed as small dense matrices
applied along each image axis.  For 28x28 digits that is both exact and
far faster than per-pixel loops, and it batches for free.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

PSNR_INF = math.inf


class QualityTier(enum.IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2

    @property
    def label(self) -> str:
        return ("low", "mid", "high")[self.value]

    @classmethod
    def parse(cls, value: "QualityTier | str | int") -> "QualityTier":
        if isinstance(value, QualityTier):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().lower()
        aliases = {"low": cls.LOW, "mid": cls.MEDIUM, "medium": cls.MEDIUM, "high": cls.HIGH}
        if key not in aliases:
            raise ValueError(f"unknown quality tier {value!r}")
        return aliases[key]


TIERS = (QualityTier.LOW, QualityTier.MEDIUM, QualityTier.HIGH)


@dataclass(frozen=True)
class DegradationConfig:
    """Parameters of the low/medium transforms.

    ``high_noise_sigma`` is 0 by default, which makes the high tier the
    identity.  Set it to a small positive value for a finite high-tier PSNR.
    """

    low_scale: float = 0.25
    low_blur: float = 1.5
    low_quant_step: float = 0.5
    low_noise: float = 0.15
    medium_scale: float = 0.5
    medium_blur: float = 0.8
    medium_noise: float = 0.08
    high_noise_sigma: float = 0.0


def _as_float(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(f"image needs at least 2 dimensions, got shape {arr.shape}")
    return arr


def _apply_axes(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # rows: (H_out, H), cols: (W_out, W); batch dims broadcast
    return rows @ img @ cols.T


@lru_cache(maxsize=64)
def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Area-averaging resampler from ``n_in`` to ``n_out`` samples."""
    m = np.zeros((n_out, n_in))
    width = n_in / n_out
    for i in range(n_out):
        lo, hi = i * width, (i + 1) * width
        for j in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap / width
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation from ``n_in`` to ``n_out`` samples, half-pixel centres."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        j0 = int(math.floor(src))
        j1 = min(j0 + 1, n_in - 1)
        t = src - j0
        m[i, j0] += 1.0 - t
        m[i, j1] += t
    m.setflags(write=False)
    return m


def downscale_upscale(img, factor: float) -> np.ndarray:
    """Area-downscale by ``factor`` then bilinearly upscale back to the input size."""
    if not (0.0 < factor <= 1.0):
        raise ValueError(f"factor must lie in (0, 1], got {factor}")
    x = _as_float(img)
    h, w = x.shape[-2:]
    if factor * min(h, w) < 1.0:
        raise ValueError(f"factor {factor} shrinks a {h}x{w} image below one pixel")
    if factor == 1.0:
        return x.copy()
    h_small, w_small = math.ceil(factor * h), math.ceil(factor * w)
    small = _apply_axes(x, _area_matrix(h, h_small), _area_matrix(w, w_small))
    out = _apply_axes(small, _bilinear_matrix(h_small, h), _bilinear_matrix(w_small, w))
    return np.clip(out, 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Unnormalised Gaussian taps at offsets ``-r..r`` with ``r = ceil(3 sigma)``."""
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-0.5 * (offsets / sigma) ** 2)


@lru_cache(maxsize=64)
def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    taps = gaussian_kernel(sigma)
    radius = (len(taps) - 1) // 2
    m = np.zeros((n, n))
    for i in range(n):
        lo, hi = max(0, i - radius), min(n, i + radius + 1)
        row = taps[lo - i + radius : hi - i + radius]
        # taps falling outside the image are dropped, the rest renormalised
        m[i, lo:hi] = row / row.sum()
    m.setflags(write=False)
    return m


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at ``ceil(3 sigma)``."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    x = _as_float(img)
    if sigma == 0:
        return x.copy()
    h, w = x.shape[-2:]
    out = _apply_axes(x, _blur_matrix(h, float(sigma)), _blur_matrix(w, float(sigma)))
    return np.clip(out, 0.0, 1.0)


BLOCK = 4


@lru_cache(maxsize=4)
def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal type-II DCT matrix; ``D @ x`` transforms a column vector."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    d[0, :] = math.sqrt(1.0 / n)
    d.setflags(write=False)
    return d


def compression_artifacts(img, quant_step: float) -> np.ndarray:
    """4x4 block-DCT with uniform coefficient quantisation."""
    if quant_step <= 0:
        raise ValueError(f"quant_step must be > 0, got {quant_step}")
    x = _as_float(img)
    h, w = x.shape[-2:]
    ph, pw = (-h) % BLOCK, (-w) % BLOCK
    if ph or pw:
        pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
        x = np.pad(x, pad, mode="edge")
    hb, wb = x.shape[-2] // BLOCK, x.shape[-1] // BLOCK
    lead = x.shape[:-2]
    blocks = x.reshape(*lead, hb, BLOCK, wb, BLOCK).swapaxes(-3, -2)
    d = dct_matrix(BLOCK)
    coeffs = d @ blocks @ d.T
    # np.round is round-half-to-even
    coeffs = np.round(coeffs / quant_step) * quant_step
    recon = d.T @ coeffs @ d
    out = recon.swapaxes(-3, -2).reshape(*lead, hb * BLOCK, wb * BLOCK)
    return np.clip(out[..., :h, :w], 0.0, 1.0)


def add_gaussian_noise(img, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    x = _as_float(img)
    if sigma == 0:
        return x.copy()
    return np.clip(x + rng.normal(0.0, sigma, size=x.shape), 0.0, 1.0)


def degrade(img, tier, rng: np.random.Generator, config: DegradationConfig | None = None) -> np.ndarray:
    """Produce the tier-quality version of ``img``.

    low:    downscale x0.25 -> blur 1.5 -> block-DCT quantise -> noise 0.15
    medium: downscale x0.5  -> blur 0.8 -> noise 0.08
    high:   identity (optionally mild noise, see ``DegradationConfig``)
    """
    cfg = config or DegradationConfig()
    tier = QualityTier.parse(tier)
    x = _as_float(img)
    if tier is QualityTier.LOW:
        y = downscale_upscale(x, cfg.low_scale)
        y = gaussian_blur(y, cfg.low_blur)
        y = compression_artifacts(y, cfg.low_quant_step)
        return add_gaussian_noise(y, cfg.low_noise, rng)
    if tier is QualityTier.MEDIUM:
        y = downscale_upscale(x, cfg.medium_scale)
        y = gaussian_blur(y, cfg.medium_blur)
        return add_gaussian_noise(y, cfg.medium_noise, rng)
    if cfg.high_noise_sigma > 0:
        return add_gaussian_noise(x, cfg.high_noise_sigma, rng)
    return x.copy()


def psnr(reference, test, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(max_value**2 / mse)


def batch_psnr(reference: np.ndarray, test: np.ndarray) -> np.ndarray:
    """Per-image PSNR over a stack ``(N, H, W)``; inf where images match."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2, axis=(-2, -1))
    with np.errstate(divide="ignore"):
        return np.where(mse == 0, np.inf, 10.0 * np.log10(1.0 / np.where(mse == 0, 1.0, mse)))
