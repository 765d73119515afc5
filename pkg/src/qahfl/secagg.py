"""Pairwise-mask secure summation over Z_{2^32} with dropout recovery.

Vectors are encoded as signed 32-bit fixed point with 16 fractional bits.
Client ``i`` adds ``PRG(s_ij)`` for every peer ``j > i`` and subtracts it for
``j < i``; the masks cancel in the sum.  When clients drop after the masks
are fixed, the survivors reveal the seeds they shared with the dropped
clients so the server can strip the unmatched masks.  Key agreement is
simulated: pair seeds come from a seeded stream rather than ECDH.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FRAC_BITS = 16
SCALE = 1 << FRAC_BITS
INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1
DEFAULT_TOLERANCE = 0.30


class SecureAggregationAborted(RuntimeError):
    """Too many clients dropped for the protocol to proceed."""


def encode_fixed(v: np.ndarray) -> np.ndarray:
    """Reals -> uint32 two's complement fixed point; raises if out of range."""
    q = np.rint(np.asarray(v, dtype=np.float64) * SCALE)
    if q.size and (q.min() < INT32_MIN or q.max() > INT32_MAX):
        raise OverflowError("value outside the signed 32-bit fixed-point range")
    return q.astype(np.int64).astype(np.uint32)


def decode_fixed(u: np.ndarray) -> np.ndarray:
    return np.asarray(u, dtype=np.uint32).view(np.int32).astype(np.float64) / SCALE


def fixed_sum(encoded: list[np.ndarray]) -> np.ndarray:
    """Plain modular sum of encoded vectors (the reference result)."""
    total = np.zeros_like(encoded[0], dtype=np.uint32)
    for e in encoded:
        total += e
    return total


@dataclass(frozen=True)
class MaskSession:
    """Pair seeds for one aggregation among ``n`` clients."""

    n: int
    seeds: np.ndarray  # (n, n) symmetric uint64; diagonal unused

    @classmethod
    def setup(cls, n: int, rng: np.random.Generator) -> "MaskSession":
        upper = rng.integers(0, 2**63, size=(n, n), dtype=np.uint64)
        seeds = np.triu(upper, 1)
        return cls(n, seeds + seeds.T)

    def pair_mask(self, i: int, j: int, length: int) -> np.ndarray:
        prg = np.random.Generator(np.random.PCG64(int(self.seeds[i, j])))
        return prg.integers(0, 1 << 32, size=length, dtype=np.uint64).astype(np.uint32)

    def masked(self, i: int, encoded: np.ndarray) -> np.ndarray:
        out = np.array(encoded, dtype=np.uint32, copy=True)
        for j in range(self.n):
            if j == i:
                continue
            m = self.pair_mask(i, j, out.size)
            if i < j:
                out += m
            else:
                out -= m
        return out


def max_dropouts(n: int, tolerance: float) -> int:
    return math.floor(tolerance * n + 1e-9)


def secure_sum(
    vectors: list[np.ndarray],
    dropout_set=(),
    tolerance: float = DEFAULT_TOLERANCE,
    rng: np.random.Generator | None = None,
    encoded: bool = False,
) -> np.ndarray:
    """Sum of the surviving clients' vectors, computed from masked submissions only.

    ``vectors`` are reals (or already-encoded uint32 when ``encoded=True``).
    Returns the modular fixed-point sum as uint32; use :func:`decode_fixed`
    for reals.  Raises :class:`SecureAggregationAborted` when more than
    ``tolerance * n`` clients are in ``dropout_set``.
    """
    n = len(vectors)
    if n == 0:
        raise ValueError("no vectors to aggregate")
    lengths = {np.asarray(v).size for v in vectors}
    if len(lengths) != 1:
        raise ValueError("all vectors must have the same length")
    dropped = set(int(d) for d in dropout_set)
    if not dropped <= set(range(n)):
        raise ValueError("dropout_set names unknown clients")
    if len(dropped) > max_dropouts(n, tolerance):
        raise SecureAggregationAborted(f"{len(dropped)} of {n} clients dropped; tolerance is {tolerance:.0%}")
    if len(dropped) == n:
        raise SecureAggregationAborted("every client dropped")

    rng = rng if rng is not None else np.random.default_rng()
    enc = [np.asarray(v, dtype=np.uint32).ravel() if encoded else encode_fixed(np.ravel(v)) for v in vectors]
    session = MaskSession.setup(n, rng)
    survivors = [i for i in range(n) if i not in dropped]

    total = np.zeros(enc[0].size, dtype=np.uint32)
    for i in survivors:
        total += session.masked(i, enc[i])
    # unmatched masks: survivor i shared s_ij with dropped j
    for i in survivors:
        for j in dropped:
            m = session.pair_mask(i, j, total.size)
            if i < j:
                total -= m
            else:
                total += m
    return total


def secure_mean(vectors: list[np.ndarray], dropout_set=(), tolerance=DEFAULT_TOLERANCE, rng=None) -> np.ndarray:
    """Decoded mean over surviving clients, shaped like the inputs."""
    shape = np.asarray(vectors[0]).shape
    total = decode_fixed(secure_sum(vectors, dropout_set, tolerance, rng))
    n_alive = len(vectors) - len(set(dropout_set))
    return (total / n_alive).reshape(shape)
