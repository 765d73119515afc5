"""Federation round loop, run configuration, ablations and metrics export."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qahfl import client as cl
from qahfl.datasets import Examples, load_mnist_idx, mnist_paths, synth_digits
from qahfl.device import DeviceProfile, default_profiles
from qahfl.imaging import TIERS, QualityTier
from qahfl.nn.model import ModelParams, init_params, mean_params, serialize
from qahfl.nn.specs import spec_for
from qahfl.partition import FederationPlan, make_plan
from qahfl.privacy import PrivacyConfig, PrivacyLedger, would_exceed
from qahfl.secagg import SecureAggregationAborted, decode_fixed, secure_sum
from qahfl.seeding import seed_tree
from qahfl.server import (
    DegradedTestSet,
    QualityWeights,
    SelectionRecord,
    ServerModel,
    apply_momentum,
    evaluate_breakdown,
    init_server,
    select_clients,
    train_server,
    update_quality_weights,
)

ABLATION_FLAGS = (
    "quality_partition",
    "hierarchical_arch",
    "privacy",
    "weighted_aggregation",
    "fedprox",
    "momentum",
    "distillation",
    "secure_agg",
    "quality_calibrated_privacy",
)

# Named ablation studies: (suite, row name, privacy mode of the suite, ablated flags).
# Every flag appears in at least one row; the "full" rows are the baselines.
ABLATION_ROWS = (
    ("standard", "full", False, ()),
    ("standard", "no_quality_partition", False, ("quality_partition",)),
    ("standard", "no_hierarchical_arch", False, ("hierarchical_arch",)),
    ("standard", "no_privacy", False, ("privacy",)),
    ("standard", "no_weighted_aggregation", False, ("weighted_aggregation",)),
    ("standard", "no_fedprox", False, ("fedprox",)),
    ("standard", "no_momentum", False, ("momentum",)),
    ("standard", "no_distillation", False, ("distillation",)),
    ("privacy", "full_private", True, ()),
    ("privacy", "no_quality_calibrated_privacy", True, ("quality_calibrated_privacy",)),
    ("privacy", "no_secure_agg", True, ("secure_agg",)),
    ("privacy", "no_private_features", True, ("privacy",)),
    ("privacy", "no_server_distillation", True, ("distillation",)),
    ("privacy", "no_private_weighting", True, ("weighted_aggregation",)),
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "mnist"  # "mnist" or "synthetic"
    mnist_dir: str | None = None
    n_train: int = 5000
    n_test: int = 10000
    synthetic_n: int = 1000
    synthetic_test_n: int = 1000
    n_clients: int = 20
    tier_fractions: tuple = (0.3, 0.4, 0.3)
    primary_share: float = 0.8
    classes_per_client: int = 3
    rounds: int = 3
    selection_fraction: float = 0.8
    # privacy
    privacy: bool = False
    delta: float = 1e-5
    sigma_by_tier: tuple = (1.1, 1.3, 1.5)
    max_eps_by_tier: tuple = (2.0, 4.0, 8.0)
    clip_norm_by_tier: tuple = (1.0, 1.0, 1.0)
    initial_budget: float = 8.0
    composer: str = "linear"
    # server
    initial_weights: tuple = (0.6, 0.8, 1.0)
    alpha: float = 0.3
    kd_alpha: float = 0.5
    temperature: float = 2.0
    beta: float = 0.9
    server_epochs: int = 5
    server_batch: int = 64
    server_lr: float = 0.05
    server_momentum: float = 0.9
    # clients
    mu_by_tier: tuple = (0.01, 0.005, 0.003)
    client_lr: float = 0.02
    client_momentum: float = 0.9
    compression_targets: tuple = (0.05, 0.10, 0.20)
    compression_schedule: tuple = (1.0, 1.4, 1.7)
    backbone_sync: bool = True
    bn_recalibration: bool = True
    count_eval_bytes: bool = True
    dropout_rate: float = 0.0
    secure_agg_tolerance: float = 0.30
    ablate: tuple = ()
    master_seed: int = 0

    def __post_init__(self):
        for name in ("tier_fractions", "sigma_by_tier", "max_eps_by_tier", "clip_norm_by_tier", "initial_weights",
                     "mu_by_tier", "compression_targets", "compression_schedule", "ablate"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        unknown = set(self.ablate) - set(ABLATION_FLAGS)
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        if self.dataset not in ("mnist", "synthetic"):
            raise ConfigError(f"dataset must be 'mnist' or 'synthetic', got {self.dataset!r}")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.n_clients < 3:
            raise ConfigError("need at least 3 clients")
        if not 0.0 < self.selection_fraction <= 1.0:
            raise ConfigError("selection_fraction must lie in (0, 1]")
        if len(self.tier_fractions) != 3 or abs(sum(self.tier_fractions) - 1.0) > 1e-9:
            raise ConfigError("tier_fractions must be three values summing to 1")
        for name in ("sigma_by_tier", "max_eps_by_tier", "clip_norm_by_tier", "initial_weights", "mu_by_tier",
                     "compression_targets"):
            if len(getattr(self, name)) != 3:
                raise ConfigError(f"{name} needs one value per tier")
        if not self.compression_schedule or min(self.compression_schedule) <= 0:
            raise ConfigError("compression_schedule must hold positive factors")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        try:
            self.privacy_config()
            QualityWeights(*self.initial_weights)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def on(self, flag: str) -> bool:
        """Whether a component is active (not ablated)."""
        if flag not in ABLATION_FLAGS:
            raise KeyError(flag)
        return flag not in self.ablate

    def privacy_config(self) -> PrivacyConfig:
        cfg = PrivacyConfig(
            enabled=self.privacy and "privacy" not in self.ablate,
            delta=self.delta,
            sigma_by_tier=tuple(self.sigma_by_tier),
            max_eps_by_tier=tuple(self.max_eps_by_tier),
            clip_norm_by_tier=tuple(self.clip_norm_by_tier),
            initial_budget=self.initial_budget,
            composer=self.composer,
        )
        return cfg if "quality_calibrated_privacy" not in self.ablate else cfg.uniform()

    def schedule_factor(self, round_idx: int) -> float:
        s = self.compression_schedule
        return s[min(round_idx, len(s)) - 1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)


def ablation_config(row_label: str, base: RunConfig | None = None) -> RunConfig:
    for _, label, private, flags in ABLATION_ROWS:
        if label == row_label:
            base = base or RunConfig()
            return dataclasses.replace(base, privacy=private, ablate=tuple(flags))
    raise KeyError(row_label)


# ---------------------------------------------------------------------------
# Ledgers
# ---------------------------------------------------------------------------


@dataclass
class ClientRound:
    client_id: int
    tier: QualityTier
    local_accuracy: float
    n_entries: int
    bytes_raw: int
    bytes_wire: int
    compression_ratio: float
    eps_round: float
    skipped: bool
    dropped: bool
    train_time_s: float
    battery_pct: float
    peak_memory_mb: float
    transfer_time_s: float


@dataclass
class RoundLedger:
    round: int
    server_accuracy: float
    tier_accuracy: dict
    weights: QualityWeights
    bytes_total: int
    bytes_per_client: float
    eval_bytes: int
    battery_by_tier: dict
    eps_by_client: dict
    selection: SelectionRecord
    sim_seconds: float
    secure_agg_ok: bool
    clients: list[ClientRound] = field(default_factory=list)
    privacy_rows: list[dict] = field(default_factory=list)
    single_tier_accuracy: dict = field(default_factory=dict)
    ablate: tuple = ()


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def load_data(config: RunConfig) -> tuple[Examples, Examples]:
    if config.dataset == "synthetic":
        train = synth_digits(config.synthetic_n, seed_tree(config.master_seed, "data", "train"))
        test = synth_digits(config.synthetic_test_n, seed_tree(config.master_seed, "data", "test"))
        return train, test
    train = load_mnist_idx(*mnist_paths(config.mnist_dir, "train"), limit=config.n_train)
    test = load_mnist_idx(*mnist_paths(config.mnist_dir, "test"), limit=config.n_test)
    return train, test


def build_plan(config: RunConfig, train: Examples) -> FederationPlan:
    return make_plan(
        train,
        n_clients=config.n_clients,
        tier_fractions=config.tier_fractions,
        primary_share=config.primary_share,
        classes_per_client=config.classes_per_client,
        seed=config.master_seed,
        quality_partition=config.on("quality_partition"),
    )


# ---------------------------------------------------------------------------
# Round loop
# ---------------------------------------------------------------------------


class Federation:
    """Holds all run state; :meth:`step` executes one round."""

    def __init__(self, config: RunConfig, data: tuple[Examples, Examples] | None = None):
        self.config = config
        seed = config.master_seed
        train, test = data if data is not None else load_data(config)
        self.plan = build_plan(config, train)
        self.profiles: dict[QualityTier, DeviceProfile] = default_profiles()
        hier = config.on("hierarchical_arch")
        self.specs = {t: spec_for(t, hier) for t in TIERS}
        self.globals: dict[QualityTier, ModelParams] = {
            t: init_params(self.specs[t], seed_tree(seed, "init", t.label), np.float32) for t in TIERS
        }
        self.states = {
            c.client_id: cl.new_client(
                c, self.profiles[c.tier], self.specs[c.tier], seed_tree(seed, "client", c.client_id, "setup"),
                params=self.globals[c.tier].copy(),
            )
            for c in self.plan.clients
        }
        self.privacy = config.privacy_config()
        self.ledger = PrivacyLedger(self.privacy, {c.client_id: c.tier for c in self.plan.clients})
        dims = tuple(self.specs[t].feature_dim for t in TIERS)
        self.server: ServerModel = init_server(seed_tree(seed, "server", "init"), dims)
        self.prev_server: np.ndarray | None = None
        self.weighted = config.on("weighted_aggregation")
        self.weights = QualityWeights(*config.initial_weights) if self.weighted else QualityWeights.uniform(1.0)
        self.tier_acc_prev: dict = {}
        self.participation: dict[int, int] = {}
        self.extractors: dict[QualityTier, ModelParams] = {}
        self.test_set = DegradedTestSet(
            test.images, test.labels, lambda t: seed_tree(seed, "test", "degrade", t.label)
        )
        self.round = 0

    # -- helpers ----------------------------------------------------------

    def _rng(self, *labels) -> np.random.Generator:
        return seed_tree(self.config.master_seed, "round", self.round, *labels)

    def _aggregate_backbones(self, tier, params: list[ModelParams], dropped: set[int]) -> ModelParams:
        if not self.config.on("secure_agg"):
            return mean_params(params)
        spec = params[0].spec
        vecs = [np.concatenate([p.flat, p.buffers]).astype(np.float64) for p in params]
        total = decode_fixed(
            secure_sum(vecs, dropped, self.config.secure_agg_tolerance, self._rng("secagg", tier.label))
        )
        mean = (total / (len(vecs) - len(dropped))).astype(np.float32)
        n = params[0].flat.size
        return ModelParams(spec, mean[:n].copy(), mean[n:].copy())

    # -- round ------------------------------------------------------------

    def step(self) -> RoundLedger:
        cfg = self.config
        self.round += 1
        r = self.round
        if r > 1 and self.weighted:
            self.weights = update_quality_weights(self.weights, self.tier_acc_prev, cfg.alpha)

        exhausted = self.ledger.exhausted_ids() if self.privacy.enabled else set()
        eligible = [c.client_id for c in self.plan.clients if c.client_id not in exhausted]
        histories = {cid: s.history for cid, s in self.states.items()}
        selection = select_clients(
            histories, self.plan, cfg.selection_fraction, self._rng("select"), r, self.participation, eligible
        )
        drop_rng = self._rng("dropout")
        dropped = {cid for cid in selection.selected if drop_rng.random() < cfg.dropout_rate}

        packets, rows, trained = [], [], {}
        mu = cfg.mu_by_tier
        for cid in selection.selected:
            self.participation[cid] = self.participation.get(cid, 0) + 1
            state = self.states[cid]
            if cfg.backbone_sync:
                g = self.globals[state.tier]
                state = dataclasses.replace(state, params=g.copy(), prev_params=g.copy())
            state, acc, report = cl.local_train(
                state, r, mu, self._rng("client", cid, "train"), cfg.client_lr, cfg.client_momentum,
                fedprox=cfg.on("fedprox"), recalibrate_bn=cfg.bn_recalibration,
            )
            self.states[cid] = state
            trained[cid] = state
            packet = self._upload(state, r)
            packet = cl.compress(packet, cfg.compression_targets, self._rng("client", cid, "compress"),
                                 cfg.schedule_factor(r))
            report = cl.upload_report(report, packet, state.profile)
            if cid not in dropped:
                packets.append(packet)
            rows.append(
                ClientRound(
                    cid, state.tier, acc, packet.n_entries, packet.bytes_raw, packet.bytes_wire,
                    packet.compression_ratio, packet.eps_spent, packet.skipped, cid in dropped,
                    report.train_time_s, report.battery_pct, report.peak_memory_mb, report.transfer_time_s,
                )
            )

        # backbone aggregation per tier (the evaluation extractors)
        secure_ok = True
        eval_bytes = 0
        new_extractors = {}
        try:
            for tier in TIERS:
                members = [cid for cid in selection.selected if self.states[cid].tier == tier]
                if not members or all(m in dropped for m in members):
                    continue
                params = [trained[m].params for m in members]
                idx_dropped = {i for i, m in enumerate(members) if m in dropped}
                new_extractors[tier] = self._aggregate_backbones(tier, params, idx_dropped)
                if cfg.count_eval_bytes:
                    eval_bytes += sum(len(serialize(trained[m].params)) for m in members if m not in dropped)
        except SecureAggregationAborted:
            secure_ok = False
            new_extractors = {}
            packets = []

        if secure_ok:
            self.extractors = new_extractors
            if cfg.backbone_sync:
                self.globals.update(new_extractors)

        live = [p for p in packets if not p.skipped and p.n_entries]
        if live:
            teacher = self.server.flat.copy() if (r > 1 and cfg.on("distillation")) else None
            model = ServerModel(self.server.flat, self.server.dims, teacher)
            trained_server, _ = train_server(
                model, live, self.weights, cfg.kd_alpha if cfg.on("distillation") else 0.0, cfg.temperature,
                cfg.server_epochs, self._rng("server", "train"), cfg.server_batch, cfg.server_lr,
                cfg.server_momentum,
            )
            before = self.server.flat.copy()
            if r > 1 and cfg.on("momentum") and cfg.beta:
                trained_server = apply_momentum(trained_server, ServerModel(before, self.server.dims), cfg.beta)
            self.prev_server = before
            self.server = ServerModel(trained_server.flat, self.server.dims)

        accuracy, single = self._evaluate()

        tier_acc = {}
        for tier in TIERS:
            accs = [row.local_accuracy for row in rows if row.tier == tier]
            tier_acc[tier] = float(np.mean(accs)) if accs else None
        self.tier_acc_prev = tier_acc

        wire = [row.bytes_wire for row in rows if not row.dropped]
        battery = {}
        for tier in TIERS:
            b = [row.battery_pct for row in rows if row.tier == tier]
            battery[tier] = float(np.mean(b)) if b else 0.0
        sim_seconds = max((row.train_time_s + row.transfer_time_s for row in rows), default=0.0)
        return RoundLedger(
            round=r,
            server_accuracy=accuracy,
            tier_accuracy=tier_acc,
            weights=self.weights,
            bytes_total=int(sum(wire) + eval_bytes),
            bytes_per_client=float(np.mean(wire)) if wire else 0.0,
            eval_bytes=eval_bytes,
            battery_by_tier=battery,
            eps_by_client={row.client_id: row.eps_round for row in rows},
            selection=selection,
            sim_seconds=sim_seconds,
            secure_agg_ok=secure_ok,
            clients=rows,
            privacy_rows=self.ledger.rows(r) if self.privacy.enabled else [],
            single_tier_accuracy=single,
            ablate=tuple(cfg.ablate),
        )

    def _upload(self, state: cl.ClientState, r: int) -> cl.FeaturePacket:
        priv = self.privacy
        cid = state.client_id
        if not priv.enabled:
            return cl.extract_features(state, priv, None, r)
        rec = self.ledger.record(cid)
        eps = cl.round_epsilon(state.dataset.size, priv.sigma(state.tier), priv.delta)
        if rec.exhausted or would_exceed(rec, eps, priv.max_eps(state.tier), priv.composer, priv.delta):
            self.ledger.mark_exhausted(cid)
            return cl.extract_features(state, priv, None, r, exhausted=True)
        packet = cl.extract_features(state, priv, self._rng("client", cid, "noise"), r)
        self.ledger.charge(cid, packet.eps_spent, r)
        return packet

    def _evaluate(self) -> tuple[float, dict]:
        if not self.extractors:
            return float("nan"), {}
        clip = self.privacy.clip_norm_by_tier if self.privacy.enabled else None
        return evaluate_breakdown(self.server, self.weights, self.test_set, self.extractors, clip)


def run_federation(config: RunConfig, data=None) -> list[RoundLedger]:
    if config.rounds == 0:
        return []
    fed = Federation(config, data)
    return [fed.step() for _ in range(config.rounds)]


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

ROUND_COLUMNS = (
    "round", "accuracy", "w_low", "w_mid", "w_high", "n_selected", "bytes_total", "bytes_per_client",
    "eval_bytes", "acc_low", "acc_mid", "acc_high", "battery_low", "battery_mid", "battery_high",
    "sim_seconds", "secure_agg_ok", "ablate",
)
CLIENT_COLUMNS = (
    "round", "client_id", "tier", "local_accuracy", "n_entries", "bytes_raw", "bytes_wire", "compression_ratio",
    "eps_round", "skipped", "dropped", "train_time_s", "battery_pct", "peak_memory_mb", "transfer_time_s",
    "score_total",
)
PRIVACY_COLUMNS = ("client_id", "tier", "round", "eps_round", "eps_total", "exhausted")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, columns, rows) -> None:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_fmt(row[c]) for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def round_row(led: RoundLedger) -> dict:
    w = led.weights.as_tuple()
    row = {
        "round": led.round,
        "accuracy": led.server_accuracy,
        "w_low": w[0],
        "w_mid": w[1],
        "w_high": w[2],
        "n_selected": len(led.selection.selected),
        "bytes_total": led.bytes_total,
        "bytes_per_client": led.bytes_per_client,
        "eval_bytes": led.eval_bytes,
        "sim_seconds": led.sim_seconds,
        "secure_agg_ok": led.secure_agg_ok,
        "ablate": "+".join(led.ablate) or "none",
    }
    for t in TIERS:
        row[f"acc_{t.label}"] = led.tier_accuracy.get(t)
        row[f"battery_{t.label}"] = led.battery_by_tier.get(t)
    return row


def export_metrics(ledgers: list[RoundLedger], out_dir, config: RunConfig | None = None) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    client_rows, privacy_rows = [], []
    for led in ledgers:
        for c in led.clients:
            row = dataclasses.asdict(c)
            row["tier"] = c.tier.label
            row["round"] = led.round
            score = led.selection.scores.get(c.client_id)
            row["score_total"] = score.total if score else None
            client_rows.append(row)
        privacy_rows.extend(led.privacy_rows)
    paths = [out / "rounds.csv", out / "clients.csv", out / "privacy.csv", out / "run.json"]
    _write_csv(paths[0], ROUND_COLUMNS, [round_row(led) for led in ledgers])
    _write_csv(paths[1], CLIENT_COLUMNS, client_rows)
    _write_csv(paths[2], PRIVACY_COLUMNS, privacy_rows)
    summary = {
        "rounds": len(ledgers),
        "final_accuracy": ledgers[-1].server_accuracy if ledgers else None,
        "accuracy_by_round": [led.server_accuracy for led in ledgers],
        "single_tier_accuracy": [
            {t.label: a for t, a in led.single_tier_accuracy.items()} for led in ledgers
        ],
    }
    doc = {"config": config.to_dict() if config else None, "summary": summary}
    try:
        paths[3].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {paths[3]}: {exc}") from exc
    return paths


def resolve_seed(config_seed: int, cli_seed: int | None = None, env=None) -> int:
    """Environment beats the command line, which beats the config file."""
    env = os.environ if env is None else env
    if env.get("QAHFL_SEED"):
        return int(env["QAHFL_SEED"])
    if cli_seed is not None:
        return cli_seed
    return config_seed

