"""Client runtime: local training, feature extraction, privatisation, compression.

A client never shares images or weights with the training path.  What leaves
the device is a :class:`FeaturePacket`, whose byte size is always measured on
its actual little-endian encoding.

The feature DP guarantee covers feature values only; labels travel in the
clear because the server trains a supervised head on them.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from qahfl.device import (
    MIB,
    DeviceProfile,
    ResourceReport,
    battery_impact,
    check_model_size,
    simulate_train_time,
    transfer_time,
)
from qahfl.imaging import QualityTier
from qahfl.nn.model import (
    ModelParams,
    ModelSpec,
    activation_bytes,
    extract_features as _features,
    init_params,
    loss_and_grad,
    predict_logits,
    recalibrate_batchnorm,
    serialize,
    sgd_step,
)
from qahfl.partition import ClientDataset
from qahfl.privacy import PrivacyConfig, clip_features, gaussian_mechanism, round_epsilon

DEFAULT_MU = (0.01, 0.005, 0.003)
DEFAULT_TARGETS = (0.05, 0.10, 0.20)
HOLDOUT_FRACTION = 0.2
INT8_RATIO = 0.25

QUANT_NONE, QUANT_INT8 = 0, 1
_HEADER = struct.Struct("<IHBIHBff")
HEADER_BYTES = _HEADER.size


class PrivacyViolation(RuntimeError):
    """An unnoised packet was about to be built while privacy is on."""


class CorruptPacketError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Packets
# ---------------------------------------------------------------------------


@dataclass
class FeaturePacket:
    client_id: int
    round: int
    tier: QualityTier
    features: np.ndarray  # (n, dim) float32, or int8 codes when quantized
    labels: np.ndarray
    quantization: str = "none"
    scales: tuple[float, float] = (0.0, 0.0)
    eps_spent: float = 0.0
    skipped: bool = False
    private: bool = False
    noised: bool = False
    bytes_raw: int = 0
    bytes_wire: int = 0

    def __post_init__(self):
        if self.private and not self.skipped and len(self.labels) and not self.noised:
            raise PrivacyViolation(f"client {self.client_id}: unnoised features in privacy mode")
        if self.quantization not in ("none", "int8"):
            raise ValueError(f"unknown quantization {self.quantization!r}")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        self.bytes_wire = len(self.to_bytes())
        if not self.bytes_raw:
            self.bytes_raw = raw_size(len(self.labels), self.dim)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1]) if self.features.ndim == 2 else 0

    @property
    def n_entries(self) -> int:
        return len(self.labels)

    @property
    def compression_ratio(self) -> float:
        return self.bytes_wire / self.bytes_raw

    @property
    def entries(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(dequantize(self), self.labels.tolist()))

    def to_bytes(self) -> bytes:
        quant = QUANT_INT8 if self.quantization == "int8" else QUANT_NONE
        head = _HEADER.pack(
            self.client_id, self.round, int(self.tier), self.n_entries, self.dim, quant, *map(float, self.scales)
        )
        payload = self.features.astype("<i1" if quant else "<f4").tobytes()
        return head + payload + self.labels.astype(np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeaturePacket":
        if len(data) < HEADER_BYTES:
            raise CorruptPacketError("packet shorter than its header")
        cid, rnd, tier, n, dim, quant, lo, step = _HEADER.unpack_from(data)
        if quant not in (QUANT_NONE, QUANT_INT8) or tier > 2:
            raise CorruptPacketError("bad packet header")
        width = 1 if quant else 4
        if len(data) != HEADER_BYTES + n * dim * width + n:
            raise CorruptPacketError("packet length does not match its header")
        pos = HEADER_BYTES
        feats = np.frombuffer(data, "<i1" if quant else "<f4", n * dim, pos).reshape(n, dim)
        labels = np.frombuffer(data, np.uint8, n, pos + n * dim * width)
        return cls(
            cid,
            rnd,
            QualityTier(tier),
            feats.astype(np.int8 if quant else np.float32),
            labels.astype(np.int64),
            "int8" if quant else "none",
            (lo, step),
            noised=True,
        )


def raw_size(n_entries: int, dim: int) -> int:
    """Bytes of the uncompressed float32 encoding."""
    return HEADER_BYTES + n_entries * dim * 4 + n_entries


def skip_packet(client_id: int, round_idx: int, tier: QualityTier, dim: int) -> FeaturePacket:
    return FeaturePacket(
        client_id, round_idx, tier, np.zeros((0, dim), np.float32), np.zeros(0, np.int64), skipped=True
    )


# ---------------------------------------------------------------------------
# Client state and training
# ---------------------------------------------------------------------------


@dataclass
class ClientState:
    dataset: ClientDataset
    profile: DeviceProfile
    params: ModelParams
    prev_params: ModelParams
    holdout: np.ndarray  # boolean mask over the dataset
    history: list[float] = field(default_factory=list)
    momentum: np.ndarray | None = None

    @property
    def client_id(self) -> int:
        return self.dataset.client_id

    @property
    def tier(self) -> QualityTier:
        return self.dataset.tier

    @property
    def spec(self) -> ModelSpec:
        return self.params.spec


def holdout_mask(n: int, rng: np.random.Generator, fraction: float = HOLDOUT_FRACTION) -> np.ndarray:
    """At least one example on each side when n >= 2."""
    k = min(max(1, round(fraction * n)), n - 1) if n >= 2 else 0
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:k]] = True
    return mask


def new_client(
    dataset: ClientDataset,
    profile: DeviceProfile,
    spec: ModelSpec,
    rng: np.random.Generator,
    params: ModelParams | None = None,
    dtype=np.float32,
) -> ClientState:
    """Build a client; raises ModelTooLargeError if the model does not fit the device."""
    if dataset.size == 0:
        raise ValueError(f"client {dataset.client_id} has no data")
    if params is None:
        params = init_params(spec, rng, dtype)
    check_model_size(profile, len(serialize(params)))
    mask = holdout_mask(dataset.size, rng)
    return ClientState(dataset, profile, params, params.copy(), mask)


def _accuracy(params: ModelParams, images, labels) -> float:
    if len(labels) == 0:
        return 0.0
    return float((predict_logits(params, images).argmax(axis=1) == labels).mean())


def local_train(
    state: ClientState,
    round_idx: int,
    mu_by_tier=DEFAULT_MU,
    rng: np.random.Generator | None = None,
    lr: float = 0.02,
    momentum: float = 0.9,
    fedprox: bool = True,
    recalibrate_bn: bool = True,
) -> tuple[ClientState, float, ResourceReport]:
    """Run ``max_epochs`` of minibatch SGD at ``max_batch``; returns a new state.

    The FedProx anchor is the model as it stood before this call, and the
    proximal term only switches on from round 2.  Afterwards the BatchNorm
    running statistics are re-estimated on the training split, since a few
    dozen steps leave them averaging over stale weights.
    """
    rng = rng if rng is not None else np.random.default_rng()
    profile, spec = state.profile, state.spec
    check_model_size(profile, len(serialize(state.params)))
    mu = mu_by_tier[int(state.tier)] if fedprox and round_idx > 1 else 0.0

    ds = state.dataset
    train_x, train_y = ds.images[~state.holdout], ds.labels[~state.holdout]
    anchor = state.params.copy()
    params = state.params.copy()
    velocity = np.zeros_like(params.flat)
    batch = profile.max_batch
    n_batches = math.ceil(len(train_y) / batch)
    for _ in range(profile.max_epochs):
        order = rng.permutation(len(train_y))
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            _, grad, _ = loss_and_grad(params, train_x[idx], train_y[idx], anchor, mu, spec.l2_lambda, rng)
            sgd_step(params.flat, grad, lr, velocity, momentum)
    if recalibrate_bn:
        recalibrate_batchnorm(params, train_x, batch)

    acc = _accuracy(params, ds.images[state.holdout], ds.labels[state.holdout])
    seconds = simulate_train_time(profile, n_batches, profile.max_epochs)
    model_bytes = len(serialize(params))
    report = ResourceReport(
        train_time_s=seconds,
        battery_pct=battery_impact(profile.power_mw, seconds / 3600.0, profile.battery_mah),
        peak_memory_mb=(3 * model_bytes + activation_bytes(spec, batch)) / MIB,
    )
    new_state = replace(state, params=params, prev_params=anchor, history=state.history + [acc], momentum=velocity)
    return new_state, acc, report


# ---------------------------------------------------------------------------
# Upload path
# ---------------------------------------------------------------------------


def extract_features(
    state: ClientState,
    privacy: PrivacyConfig | None = None,
    rng: np.random.Generator | None = None,
    round_idx: int = 0,
    exhausted: bool = False,
) -> FeaturePacket:
    """Eval-mode features for every local example, privatised when enabled."""
    privacy = privacy or PrivacyConfig()
    spec, tier = state.spec, state.tier
    if privacy.enabled and exhausted:
        return skip_packet(state.client_id, round_idx, tier, spec.feature_dim)
    feats = _features(state.params, state.dataset.images).astype(np.float32)
    labels = state.dataset.labels.astype(np.int64)
    eps = 0.0
    if privacy.enabled:
        rng = rng if rng is not None else np.random.default_rng()
        clip = privacy.clip_norm(tier)
        sigma = privacy.sigma(tier)
        feats = gaussian_mechanism(clip_features(feats, clip), sigma, clip, rng).astype(np.float32)
        eps = round_epsilon(len(labels), sigma, privacy.delta)
    return FeaturePacket(
        state.client_id,
        round_idx,
        tier,
        feats,
        labels,
        eps_spent=eps,
        private=privacy.enabled,
        noised=privacy.enabled,
    )


def entries_for_ratio(n: int, dim: int, target: float) -> int:
    """Entries to keep so the int8 encoding is as close as possible to ``target`` of raw."""
    want = (target * raw_size(n, dim) - HEADER_BYTES) / (dim + 1)
    return int(min(n, max(1, round(want)))) if n else 0


def quantize_int8(feats: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    """Affine map of [min, max] onto the 255 codes -127..127; returns codes and (lo, step)."""
    if feats.size == 0:
        return np.zeros(feats.shape, np.int8), (0.0, 0.0)
    lo, hi = float(feats.min()), float(feats.max())
    step = (hi - lo) / 254.0
    if step == 0.0:
        return np.full(feats.shape, -127, np.int8), (lo, 0.0)
    codes = np.rint((feats.astype(np.float64) - lo) / step) - 127
    return np.clip(codes, -127, 127).astype(np.int8), (lo, step)


def compress(
    packet: FeaturePacket,
    target_ratio_by_tier=DEFAULT_TARGETS,
    rng: np.random.Generator | None = None,
    schedule_factor: float = 1.0,
) -> FeaturePacket:
    """int8 quantization, then seeded subsampling for targets below 0.25.

    ``schedule_factor`` divides the tier target (the per-round compression
    schedule).  A target of 1.0 or more leaves the packet untouched.
    """
    target = target_ratio_by_tier[int(packet.tier)] / schedule_factor
    if not 0.0 < target:
        raise ValueError("target ratio must be positive")
    if packet.skipped or packet.quantization != "none" or target >= 1.0:
        return packet
    feats, labels = packet.features, packet.labels
    if target < INT8_RATIO and len(labels):
        rng = rng if rng is not None else np.random.default_rng()
        keep = entries_for_ratio(len(labels), packet.dim, target)
        idx = np.sort(rng.choice(len(labels), size=keep, replace=False))
        feats, labels = feats[idx], labels[idx]
    codes, scales = quantize_int8(feats)
    return replace(packet, features=codes, labels=labels, quantization="int8", scales=scales)


def dequantize(packet: FeaturePacket) -> np.ndarray:
    if packet.quantization == "none":
        return np.asarray(packet.features, dtype=np.float32)
    lo, step = packet.scales
    if not (math.isfinite(lo) and math.isfinite(step)) or step < 0:
        raise CorruptPacketError("bad quantization scales")
    return ((packet.features.astype(np.float64) + 127) * step + lo).astype(np.float32)


def upload_report(report: ResourceReport, packet: FeaturePacket, profile: DeviceProfile) -> ResourceReport:
    return replace(
        report, bytes_up=packet.bytes_wire, transfer_time_s=transfer_time(packet.bytes_wire, profile.bandwidth_mbps)
    )
