"""Non-IID federation plans: primary-class skew, device tiers, Gini statistic."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qahfl.datasets import N_CLASSES, Examples
from qahfl.imaging import TIERS, DegradationConfig, QualityTier, degrade
from qahfl.seeding import seed_tree

DEFAULT_TIER_FRACTIONS = (0.3, 0.4, 0.3)
SIZE_RANGE = (240, 500)
MIN_CLIENT_SIZE = 20


class InsufficientExamplesError(ValueError):
    pass


@dataclass
class ClientDataset:
    client_id: int
    images: np.ndarray
    labels: np.ndarray
    tier: QualityTier
    primary_classes: tuple[int, ...]
    source_index: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.labels)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_CLASSES)

    def primary_share(self) -> float:
        return float(np.isin(self.labels, self.primary_classes).mean())


@dataclass
class FederationPlan:
    clients: list[ClientDataset]
    tier_fractions: tuple[float, float, float]
    seed: int
    gini: float = 0.0

    def __post_init__(self):
        self.gini = gini_coefficient(self)

    def tier_counts(self) -> dict[QualityTier, int]:
        return {t: sum(c.tier == t for c in self.clients) for t in TIERS}

    def clients_of(self, tier: QualityTier) -> list[ClientDataset]:
        return [c for c in self.clients if c.tier == tier]

    def class_counts(self) -> np.ndarray:
        return np.stack([c.class_histogram() for c in self.clients])

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "gini": self.gini,
            "tier_fractions": list(self.tier_fractions),
            "clients": [
                {
                    "client_id": c.client_id,
                    "tier": c.tier.label,
                    "size": c.size,
                    "primary_classes": list(c.primary_classes),
                    "class_histogram": c.class_histogram().tolist(),
                }
                for c in self.clients
            ],
        }

    def export_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def largest_remainder(fractions, total: int) -> list[int]:
    quotas = [f * total for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def assign_tiers(n_clients: int, tier_fractions) -> list[QualityTier]:
    """Contiguous tier blocks by client id: low first, then mid, then high."""
    counts = largest_remainder(tier_fractions, n_clients)
    if min(counts) < 1:
        raise ValueError(f"tier fractions {tuple(tier_fractions)} leave a tier empty at n={n_clients}")
    tiers: list[QualityTier] = []
    for tier, count in zip(TIERS, counts):
        tiers.extend([tier] * count)
    return tiers


def gini_coefficient(plan_or_counts) -> float:
    """Gini over the flattened per-client-per-class count vector."""
    if isinstance(plan_or_counts, FederationPlan):
        counts = plan_or_counts.class_counts()
    else:
        counts = plan_or_counts
    v = np.sort(np.asarray(counts, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise ValueError("empty count vector")
    total = v.sum()
    if total == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    # sorted closed form of sum_ij |v_i - v_j| / (2 n^2 mean)
    return float(np.sum((2 * ranks - n - 1) * v) / (n * total))


def _client_sizes(n_clients: int, pool: int, rng: np.random.Generator) -> np.ndarray:
    sizes = rng.integers(SIZE_RANGE[0], SIZE_RANGE[1] + 1, size=n_clients)
    if sizes.sum() > pool:
        # shrink proportionally so the federation fits in the example pool
        sizes = np.floor(sizes * (pool / sizes.sum())).astype(np.int64)
    if sizes.min() < MIN_CLIENT_SIZE:
        raise InsufficientExamplesError(
            f"{pool} examples cannot give {n_clients} clients at least {MIN_CLIENT_SIZE} each"
        )
    return sizes


def make_plan(
    examples: Examples,
    n_clients: int = 20,
    tier_fractions=DEFAULT_TIER_FRACTIONS,
    primary_share: float = 0.8,
    classes_per_client: int | tuple[int, int] = 3,
    seed: int = 0,
    degradation: DegradationConfig | None = None,
    quality_partition: bool = True,
) -> FederationPlan:
    """Split ``examples`` into skewed, tiered client datasets.

    ``classes_per_client`` is either a fixed count or an inclusive range the
    per-client count is drawn from.  With ``quality_partition=False`` every
    example receives a uniformly random quality tier instead of its device's.
    """
    if n_clients < 3:
        raise ValueError("need at least 3 clients (one per tier)")
    if not 0.5 <= primary_share <= 1.0:
        raise ValueError("primary_share must lie in [0.5, 1]")
    if not math.isclose(sum(tier_fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"tier fractions sum to {sum(tier_fractions)}, not 1")
    if isinstance(classes_per_client, int):
        k_lo = k_hi = classes_per_client
    else:
        k_lo, k_hi = classes_per_client
    if not 1 <= k_lo <= k_hi < N_CLASSES:
        raise ValueError(f"bad classes_per_client {classes_per_client}")

    tiers = assign_tiers(n_clients, tier_fractions)
    rng = seed_tree(seed, "plan")
    sizes = _client_sizes(n_clients, len(examples), rng)

    pools = [list(rng.permutation(np.flatnonzero(examples.labels == c))) for c in range(N_CLASSES)]

    clients = []
    for cid in range(n_clients):
        size = int(sizes[cid])
        k = int(rng.integers(k_lo, k_hi + 1))
        n_primary = int(round(primary_share * size))
        per_class = math.ceil(n_primary / k)
        stocked = [c for c in range(N_CLASSES) if len(pools[c]) >= per_class]
        if len(stocked) < k:
            stocked = sorted(range(N_CLASSES), key=lambda c: -len(pools[c]))[:k]
        primaries = tuple(sorted(int(c) for c in rng.choice(stocked, size=k, replace=False)))

        want = {c: n_primary // k for c in primaries}
        for c in rng.choice(primaries, size=n_primary % k, replace=False):
            want[int(c)] += 1
        taken: list[int] = []
        shortfall = 0
        for c in primaries:
            got = min(want[c], len(pools[c]))
            taken.extend(pools[c][:got])
            del pools[c][:got]
            shortfall += want[c] - got
        for c in primaries:
            if shortfall == 0:
                break
            got = min(shortfall, len(pools[c]))
            taken.extend(pools[c][:got])
            del pools[c][:got]
            shortfall -= got

        n_got = len(taken)
        if n_got == 0:
            raise InsufficientExamplesError(f"client {cid}: primary classes {primaries} exhausted")
        # keep the primary share when primary pools ran short
        if primary_share < 1.0:
            n_other = min(size - n_primary, int(round(n_got * (1 - primary_share) / primary_share)))
        else:
            n_other = 0
        others = [c for c in range(N_CLASSES) if c not in primaries]
        for _ in range(n_other):
            live = [c for c in others if pools[c]]
            if not live:
                break
            c = int(rng.choice(live))
            taken.append(pools[c].pop())

        index = np.asarray(taken, dtype=np.int64)
        index = index[rng.permutation(len(index))]
        clients.append(
            ClientDataset(
                client_id=cid,
                images=examples.images[index],
                labels=examples.labels[index],
                tier=tiers[cid],
                primary_classes=primaries,
                source_index=index,
            )
        )

    for client in clients:
        drng = seed_tree(seed, "degrade", client.client_id)
        if quality_partition:
            client.images = degrade(client.images, client.tier, drng, degradation)
        else:
            mixed = drng.integers(0, len(TIERS), size=client.size)
            out = np.empty_like(client.images)
            for tier in TIERS:
                sel = mixed == tier
                out[sel] = degrade(client.images[sel], tier, drng, degradation)
            client.images = out

    return FederationPlan(clients=clients, tier_fractions=tuple(tier_fractions), seed=seed)
