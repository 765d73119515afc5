"""Feature-level differential privacy: clipping, Gaussian noise, epsilon accounting.

Per-round epsilon follows the closed form

    eps = 2 * sqrt(2 ln(1.25/delta)) / (|D| * sigma)

and is composed across rounds either by plain summation (default) or by a
Renyi-DP bound evaluated on a small grid of orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from qahfl.imaging import QualityTier

RDP_ORDERS = (1.5, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)


@dataclass(frozen=True)
class PrivacyConfig:
    enabled: bool = False
    delta: float = 1e-5
    sigma_by_tier: tuple[float, float, float] = (1.1, 1.3, 1.5)
    max_eps_by_tier: tuple[float, float, float] = (2.0, 4.0, 8.0)
    clip_norm_by_tier: tuple[float, float, float] = (1.0, 1.0, 1.0)
    initial_budget: float = 8.0
    composer: str = "linear"

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if min(self.sigma_by_tier) <= 0:
            raise ValueError("sigma must be positive for every tier")
        if min(self.clip_norm_by_tier) <= 0:
            raise ValueError("clip norm must be positive for every tier")
        if self.composer not in ("linear", "rdp"):
            raise ValueError(f"unknown composer {self.composer!r}")

    def sigma(self, tier) -> float:
        return self.sigma_by_tier[QualityTier.parse(tier)]

    def max_eps(self, tier) -> float:
        return min(self.max_eps_by_tier[QualityTier.parse(tier)], self.initial_budget)

    def clip_norm(self, tier) -> float:
        return self.clip_norm_by_tier[QualityTier.parse(tier)]

    def uniform(self) -> "PrivacyConfig":
        """Same sigma and cap for every tier (the quality-calibration ablation)."""
        sigma = float(np.mean(self.sigma_by_tier))
        cap = min(self.max_eps_by_tier)
        return replace(self, sigma_by_tier=(sigma,) * 3, max_eps_by_tier=(cap,) * 3)


def clip_features(f: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale each row (or a single vector) to L2 norm at most ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    f = np.asarray(f)
    norms = np.linalg.norm(f, axis=-1, keepdims=True)
    big = norms > clip_norm
    scale = np.where(big, clip_norm / np.where(big, norms, 1.0), 1.0)
    return f * scale


def gaussian_mechanism(f_clipped: np.ndarray, sigma: float, clip_norm: float, rng: np.random.Generator) -> np.ndarray:
    """Add N(0, (sigma * clip_norm)^2) to every coordinate."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    f = np.asarray(f_clipped)
    if sigma == 0:
        return f.copy()
    return f + rng.normal(0.0, sigma * clip_norm, size=f.shape).astype(f.dtype, copy=False)


def round_epsilon(dataset_size: int, sigma: float, delta: float) -> float:
    if dataset_size < 1:
        raise ValueError("dataset_size must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return 2.0 * math.sqrt(2.0 * math.log(1.25 / delta)) / (dataset_size * sigma)


def rdp_compose(eps_rounds, delta: float, orders=RDP_ORDERS) -> float:
    """RDP bound for a sequence of Gaussian releases given their per-round epsilons.

    Each round's epsilon is mapped back to the noise multiplier of a classical
    Gaussian mechanism, z = sqrt(2 ln(1.25/delta)) / eps, whose Renyi
    divergence at order a is a / (2 z^2).  The total is converted with
    eps = min_a [ sum RDP(a) + ln(1/delta) / (a - 1) ].
    """
    eps_rounds = [e for e in eps_rounds if e > 0]
    if not eps_rounds:
        return 0.0
    c = 2.0 * math.log(1.25 / delta)
    rho = sum(e * e / (2.0 * c) for e in eps_rounds)
    return min(a * rho + math.log(1.0 / delta) / (a - 1.0) for a in orders)


@dataclass
class ClientPrivacy:
    client_id: int
    tier: QualityTier
    eps_per_round: list[tuple[int, float]] = field(default_factory=list)
    eps_total: float = 0.0
    exhausted: bool = False

    @property
    def rounds_participated(self) -> int:
        return len(self.eps_per_round)


def compose(eps_values, composer: str = "linear", delta: float = 1e-5) -> float:
    if composer == "linear":
        return float(sum(eps_values))
    if composer == "rdp":
        return rdp_compose(eps_values, delta)
    raise ValueError(f"unknown composer {composer!r}")


def compose_and_enforce(
    record: ClientPrivacy,
    new_eps: float,
    tier_max: float,
    round_idx: int | None = None,
    composer: str = "linear",
    delta: float = 1e-5,
) -> ClientPrivacy:
    """Return a new record with ``new_eps`` composed in and the exhaustion flag set."""
    if new_eps < 0:
        raise ValueError("new_eps must be non-negative")
    rnd = round_idx if round_idx is not None else record.rounds_participated + 1
    history = record.eps_per_round + [(rnd, float(new_eps))]
    total = compose([e for _, e in history], composer, delta)
    return replace(record, eps_per_round=history, eps_total=total, exhausted=total >= tier_max)


def would_exceed(record: ClientPrivacy, new_eps: float, tier_max: float, composer="linear", delta=1e-5) -> bool:
    projected = compose([e for _, e in record.eps_per_round] + [new_eps], composer, delta)
    return projected > tier_max


class PrivacyLedger:
    """Per-client records; the orchestrator is its only writer."""

    def __init__(self, config: PrivacyConfig, tiers: dict[int, QualityTier]):
        self.config = config
        self.records = {cid: ClientPrivacy(cid, tier) for cid, tier in tiers.items()}

    def record(self, client_id: int) -> ClientPrivacy:
        return self.records[client_id]

    def exhausted_ids(self) -> set[int]:
        return {cid for cid, r in self.records.items() if r.exhausted}

    def charge(self, client_id: int, eps: float, round_idx: int) -> ClientPrivacy:
        rec = self.records[client_id]
        updated = compose_and_enforce(
            rec, eps, self.config.max_eps(rec.tier), round_idx, self.config.composer, self.config.delta
        )
        self.records[client_id] = updated
        return updated

    def mark_exhausted(self, client_id: int) -> None:
        self.records[client_id] = replace(self.records[client_id], exhausted=True)

    def rows(self, round_idx: int) -> list[dict]:
        out = []
        for cid in sorted(self.records):
            r = self.records[cid]
            eps_round = sum(e for rnd, e in r.eps_per_round if rnd == round_idx)
            out.append(
                {
                    "client_id": cid,
                    "tier": r.tier.label,
                    "round": round_idx,
                    "eps_round": eps_round,
                    "eps_total": r.eps_total,
                    "exhausted": int(r.exhausted),
                }
            )
        return out

