"""Device tiers and the simulated cost model.

Nothing here reads a clock: training time is a linear function of the
number of optimiser steps so that runs are reproducible on any machine.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from qahfl.imaging import TIERS, QualityTier

MB = 1_000_000
MIB = 1 << 20
BATTERY_VOLTAGE = 3.7


class ModelTooLargeError(RuntimeError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    tier: QualityTier
    ram_mb: int
    cpu_cores: int
    bandwidth_mbps: float
    battery_mah: float
    max_model_mb: float
    max_batch: int
    max_epochs: int
    power_mw: float
    # simulated seconds per optimiser step at max_batch
    batch_cost_s: float

    def __post_init__(self):
        numeric = asdict(self)
        numeric.pop("tier")
        bad = [k for k, v in numeric.items() if v <= 0]
        if bad:
            raise ValueError(f"{self.tier.label} profile has non-positive fields: {bad}")

    def with_overrides(self, **kwargs) -> "DeviceProfile":
        return replace(self, **kwargs)


def default_profiles() -> dict[QualityTier, DeviceProfile]:
    low, mid, high = TIERS
    return {
        low: DeviceProfile(low, 512, 2, 1, 2000, 5, 8, 2, power_mw=800, batch_cost_s=0.27),
        mid: DeviceProfile(mid, 2048, 4, 10, 3000, 20, 16, 3, power_mw=1500, batch_cost_s=0.43),
        high: DeviceProfile(high, 6144, 8, 50, 4000, 50, 32, 5, power_mw=2500, batch_cost_s=0.58),
    }


@dataclass
class ResourceReport:
    train_time_s: float = 0.0
    battery_pct: float = 0.0
    peak_memory_mb: float = 0.0
    bytes_up: int = 0
    transfer_time_s: float = 0.0


def battery_impact(power_mw: float, train_time_h: float, battery_mah: float) -> float:
    """Percent of battery capacity drained: P*T / (capacity * 3.7 V) * 100."""
    if battery_mah <= 0:
        raise ValueError("battery capacity must be positive")
    if power_mw < 0 or train_time_h < 0:
        raise ValueError("power and time must be non-negative")
    return power_mw * train_time_h / (battery_mah * BATTERY_VOLTAGE) * 100.0


def simulate_train_time(profile: DeviceProfile, n_batches: int, epochs: int) -> float:
    if n_batches < 0 or epochs < 0:
        raise ValueError("counts must be non-negative")
    return epochs * n_batches * profile.batch_cost_s


def transfer_time(n_bytes: float, bandwidth_mbps: float) -> float:
    """Seconds to move ``n_bytes`` over a link of ``bandwidth_mbps`` (10^6 bit/s)."""
    if bandwidth_mbps <= 0:
        raise ValueError("bandwidth must be positive")
    return 8.0 * n_bytes / (bandwidth_mbps * 1e6)


def check_model_size(profile: DeviceProfile, model_bytes: int) -> None:
    limit = profile.max_model_mb * MIB
    if model_bytes > limit:
        raise ModelTooLargeError(
            f"{profile.tier.label} device allows {profile.max_model_mb} MB, model needs {model_bytes / MIB:.2f} MB"
        )
