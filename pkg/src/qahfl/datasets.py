"""Dataset ingestion: MNIST IDX files and a procedural digit generator.

Examples are held as a pair of arrays rather than a list of objects:
``images`` is ``(N, 28, 28)`` float in ``[0, 1]`` and ``labels`` is ``(N,)``
int.  :class:`LabeledExample` exists for callers that want single items.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qahfl.imaging import gaussian_blur

N_CLASSES = 10
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

REPO_ROOT = Path(__file__).resolve().parents[2]
DEFAULT_MNIST_DIR = REPO_ROOT / "data" / "mnist"


class IdxFormatError(ValueError):
    """Base class for malformed IDX input."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    label: int

    def __post_init__(self):
        if not 0 <= int(self.label) < N_CLASSES:
            raise ValueError(f"label {self.label} outside 0..{N_CLASSES - 1}")


@dataclass
class Examples:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx: int) -> LabeledExample:
        return LabeledExample(self.images[idx], int(self.labels[idx]))

    def subset(self, index) -> "Examples":
        return Examples(self.images[index], self.labels[index])


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_header(raw: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: file shorter than its {header_len}-byte header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", raw[4:header_len])


def load_mnist_idx(images_path, labels_path, limit: int | None = None) -> Examples:
    """Read the first ``limit`` examples from an IDX image/label file pair.

    Plain or gzip-compressed files are accepted.  Pixels are divided by 255.
    """
    img_raw = _read_bytes(images_path)
    lbl_raw = _read_bytes(labels_path)
    n_img, rows, cols = _parse_header(img_raw, IMAGE_MAGIC, 3, images_path)
    (n_lbl,) = _parse_header(lbl_raw, LABEL_MAGIC, 1, labels_path)
    if n_img != n_lbl:
        raise CountMismatchError(f"{n_img} images but {n_lbl} labels")
    if len(img_raw) < 16 + n_img * rows * cols:
        raise TruncatedFileError(f"{images_path}: payload shorter than {n_img} images")
    if len(lbl_raw) < 8 + n_lbl:
        raise TruncatedFileError(f"{labels_path}: payload shorter than {n_lbl} labels")

    n = n_img if limit is None else min(int(limit), n_img)
    if n < 0:
        raise ValueError("limit must be >= 0")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    if labels.size and labels.max() >= N_CLASSES:
        raise IdxFormatError(f"{labels_path}: label {labels.max()} out of range")
    images = pixels.reshape(n, rows, cols).astype(np.float64) / 255.0
    return Examples(images, labels)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 IDX files (used to build test fixtures)."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def mnist_paths(directory=None, split: str = "train") -> tuple[Path, Path]:
    """Locate the IDX pair for ``split`` ('train' or 't10k').

    Search order: ``directory``, ``$QAHFL_MNIST_DIR``, the bundled ``data/mnist``.
    Both ``.gz`` and uncompressed names are recognised.
    """
    prefix = {"train": "train", "test": "t10k", "t10k": "t10k"}[split]
    candidates = [directory, os.environ.get("QAHFL_MNIST_DIR"), DEFAULT_MNIST_DIR]
    for base in candidates:
        if not base:
            continue
        base = Path(base)
        for suffix in ("", ".gz"):
            img = base / f"{prefix}-images-idx3-ubyte{suffix}"
            lbl = base / f"{prefix}-labels-idx1-ubyte{suffix}"
            if img.exists() and lbl.exists():
                return img, lbl
    raise FileNotFoundError(f"no MNIST {split} IDX files found (set QAHFL_MNIST_DIR)")


def mnist_available(directory=None) -> bool:
    try:
        mnist_paths(directory, "train")
        mnist_paths(directory, "test")
    except FileNotFoundError:
        return False
    return True


# ---------------------------------------------------------------------------
# Synthetic digits
# ---------------------------------------------------------------------------

# Stroke templates on a unit square (x right, y down).  Each digit is a list
# of polylines; arcs are pre-sampled.


def _arc(cx, cy, rx, ry, a0, a1, n=12):
    t = np.linspace(np.radians(a0), np.radians(a1), n)
    return list(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


_TEMPLATES: dict[int, list[list[tuple[float, float]]]] = {
    0: [_arc(0.5, 0.5, 0.28, 0.38, 0, 360, 24)],
    1: [[(0.38, 0.25), (0.52, 0.12), (0.52, 0.88)], [(0.38, 0.88), (0.66, 0.88)]],
    2: [_arc(0.5, 0.33, 0.25, 0.2, 200, 380, 12) + [(0.25, 0.86), (0.77, 0.86)]],
    3: [_arc(0.48, 0.31, 0.24, 0.19, 210, 450, 12), _arc(0.48, 0.69, 0.26, 0.19, 270, 510, 12)],
    4: [[(0.62, 0.88), (0.62, 0.12), (0.22, 0.64), (0.8, 0.64)]],
    5: [[(0.74, 0.13), (0.3, 0.13), (0.28, 0.46)] + _arc(0.5, 0.65, 0.25, 0.22, 230, 490, 12)],
    6: [[(0.66, 0.12), (0.38, 0.42)] + _arc(0.5, 0.66, 0.23, 0.22, 200, 560, 20)],
    7: [[(0.24, 0.14), (0.78, 0.14), (0.42, 0.88)], [(0.38, 0.5), (0.7, 0.5)]],
    8: [_arc(0.5, 0.3, 0.2, 0.18, 0, 360, 18), _arc(0.5, 0.68, 0.25, 0.21, 0, 360, 20)],
    9: [_arc(0.5, 0.34, 0.23, 0.22, 0, 360, 18), [(0.73, 0.36), (0.62, 0.88)]],
}


def _rasterise(polylines, size: int, thickness: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dist = np.full((size, size), np.inf)
    for line in polylines:
        pts = np.asarray(line, dtype=np.float64) * size
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            dx, dy = x1 - x0, y1 - y0
            seg2 = dx * dx + dy * dy
            t = ((xx - x0) * dx + (yy - y0) * dy) / seg2 if seg2 > 0 else np.zeros_like(xx)
            t = np.clip(t, 0.0, 1.0)
            d = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
            np.minimum(dist, d, out=dist)
    return np.clip(thickness - dist + 0.5, 0.0, 1.0)


def synth_digits(n: int, rng: np.random.Generator, size: int = 28) -> Examples:
    """Draw ``n`` jittered digit glyphs; labels cycle so every class appears when n >= 10."""
    if n < 0:
        raise ValueError("n must be >= 0")
    labels = np.arange(n) % N_CLASSES
    labels = labels[rng.permutation(n)]
    images = np.empty((n, size, size))
    for k, label in enumerate(labels):
        scale = rng.uniform(0.72, 0.95)
        angle = rng.normal(0.0, 0.15)
        shear = rng.normal(0.0, 0.12)
        shift = rng.normal(0.0, 0.035, size=2)
        c, s = np.cos(angle), np.sin(angle)
        mat = np.array([[c, -s + shear], [s, c]]) * scale
        polylines = []
        for line in _TEMPLATES[int(label)]:
            pts = np.asarray(line) - 0.5
            pts = pts + rng.normal(0.0, 0.015, size=pts.shape)
            polylines.append(pts @ mat.T + 0.5 + shift)
        img = _rasterise(polylines, size, thickness=rng.uniform(0.9, 1.8))
        img = gaussian_blur(img, 0.5) * rng.uniform(0.8, 1.0)
        images[k] = img
    return Examples(images, labels.astype(np.int64))
