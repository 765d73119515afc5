"""Hierarchical seed derivation.

Every random stream in a run is addressed by a label path such as
``("round", 2, "client", 7, "dropout")``.  The stream seed is a hash of the
master seed and the path, so adding a client or a round never shifts the
numbers any other stream sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _path_digest(master_seed: int, labels: tuple) -> bytes:
    h = hashlib.sha256()
    h.update(b"qahfl-seed-v1")
    h.update(int(master_seed).to_bytes(16, "little", signed=True))
    for label in labels:
        token = repr(label).encode("utf-8")
        # length prefix keeps ("ab",) distinct from ("a", "b")
        h.update(len(token).to_bytes(4, "little"))
        h.update(token)
    return h.digest()


def seed_tree(master_seed: int, *labels) -> np.random.Generator:
    """Return an independent generator for ``labels`` under ``master_seed``."""
    digest = _path_digest(master_seed, labels)
    entropy = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(master_seed: int, *labels) -> int:
    """A 63-bit integer seed for APIs that want a plain int."""
    return int.from_bytes(_path_digest(master_seed, labels)[:8], "little") >> 1
