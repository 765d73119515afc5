"""Server side: client selection, quality weights, fusion head, distillation.

The fusion model maps a tier's feature vector through that tier's projection
into a shared 64-d space, scales it by the tier's quality weight and runs a
small MLP head.  An uploaded sample only ever carries one tier's features,
so absent tiers contribute nothing to its fused vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from qahfl.client import FeaturePacket, dequantize
from qahfl.imaging import TIERS, DegradationConfig, QualityTier, degrade
from qahfl.nn.model import ModelParams, extract_features, log_softmax, softmax
from qahfl.partition import FederationPlan
from qahfl.privacy import clip_features

FEATURE_DIMS = (16, 32, 64)
FUSION_DIM = 64
N_CLASSES = 10
INITIAL_WEIGHTS = (0.6, 0.8, 1.0)

# score = 0.4 perf + 0.2 size + 0.2 trend + 0.2 diversity
SCORE_COEFS = (0.4, 0.2, 0.2, 0.2)
EMA_DECAY = 0.5


# ---------------------------------------------------------------------------
# Quality weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QualityWeights:
    w_low: float = INITIAL_WEIGHTS[0]
    w_mid: float = INITIAL_WEIGHTS[1]
    w_high: float = INITIAL_WEIGHTS[2]

    def __post_init__(self):
        for w in self.as_tuple():
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"quality weight {w} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_low, self.w_mid, self.w_high)

    def __getitem__(self, tier) -> float:
        return self.as_tuple()[QualityTier.parse(tier)]

    @classmethod
    def uniform(cls, value: float = 1.0) -> "QualityWeights":
        return cls(value, value, value)


def update_quality_weights(weights: QualityWeights, avg_accuracy_by_tier, alpha: float = 0.3) -> QualityWeights:
    """w <- alpha w + (1 - alpha) acc per tier.

    ``avg_accuracy_by_tier`` may be a sequence of three values or a mapping;
    a tier with no accuracy this round (None or missing) keeps its weight.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if isinstance(avg_accuracy_by_tier, dict):
        accs = [avg_accuracy_by_tier.get(t, avg_accuracy_by_tier.get(int(t))) for t in TIERS]
    else:
        accs = list(avg_accuracy_by_tier)
    out = []
    for w, acc in zip(weights.as_tuple(), accs):
        if acc is None or (isinstance(acc, float) and math.isnan(acc)):
            out.append(w)
            continue
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        out.append(min(1.0, max(0.0, alpha * w + (1.0 - alpha) * acc)))
    return QualityWeights(*out)


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientScore:
    perf_ema: float
    data_term: float
    trend: float
    diversity_bonus: float
    total: float


@dataclass
class SelectionRecord:
    round: int
    selected: list[int]
    scores: dict[int, ClientScore] = field(default_factory=dict)


def performance_ema(history, decay: float = EMA_DECAY) -> float | None:
    """Exponentially weighted accuracy; the latest round weighs most."""
    if not history:
        return None
    ema = history[0]
    for acc in history[1:]:
        ema = decay * ema + (1.0 - decay) * acc
    return float(ema)


def _trend(history) -> float:
    if len(history) < 2:
        return 0.5
    return min(1.0, max(0.0, history[-1] - history[-2] + 0.5))


def select_clients(
    histories: dict[int, list[float]],
    plan: FederationPlan,
    fraction: float = 0.8,
    rng: np.random.Generator | None = None,
    round_idx: int = 1,
    participation: dict[int, int] | None = None,
    eligible=None,
) -> SelectionRecord:
    """Pick ``ceil(fraction * eligible)`` clients, at least one per represented tier.

    ``participation`` counts past selections per client; the diversity bonus
    is ``1 - selections / (round_idx - 1)`` so rarely chosen clients get a lift.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    by_id = {c.client_id: c for c in plan.clients}
    ids = sorted(by_id if eligible is None else set(eligible) & set(by_id))
    if not ids:
        raise ValueError("no eligible clients")
    k = math.ceil(fraction * len(ids) - 1e-9)
    tiebreak = dict(zip(ids, rng.random(len(ids))))

    scores: dict[int, ClientScore] = {}
    if round_idx <= 1:
        chosen = sorted(rng.choice(ids, size=k, replace=False).tolist())
    else:
        participation = participation or {}
        max_size = max(by_id[i].size for i in ids)
        emas = {i: performance_ema(histories.get(i, [])) for i in ids}
        seen = [e for e in emas.values() if e is not None]
        fill = float(np.mean(seen)) if seen else 0.0
        past_rounds = max(1, round_idx - 1)
        a, b, c, d = SCORE_COEFS
        for i in ids:
            perf = emas[i] if emas[i] is not None else fill
            data = by_id[i].size / max_size
            trend = _trend(histories.get(i, []))
            div = 1.0 - min(1.0, participation.get(i, 0) / past_rounds)
            scores[i] = ClientScore(perf, data, trend, div, a * perf + b * data + c * trend + d * div)
        ranked = sorted(ids, key=lambda i: (-scores[i].total, tiebreak[i]))
        chosen = ranked[:k]

    chosen = _ensure_tiers(chosen, ids, by_id, scores, tiebreak)
    return SelectionRecord(round_idx, sorted(chosen), scores)


def _ensure_tiers(chosen, ids, by_id, scores, tiebreak) -> list[int]:
    chosen = list(chosen)

    def rank(i):
        s = scores[i].total if i in scores else 0.0
        return (-s, tiebreak[i])

    for tier in TIERS:
        pool = [i for i in ids if by_id[i].tier == tier]
        if not pool or any(by_id[i].tier == tier for i in chosen):
            continue
        best = min(pool, key=rank)
        # drop the weakest member of the most crowded tier
        counts = {t: sum(by_id[i].tier == t for i in chosen) for t in TIERS}
        donors = [i for i in chosen if counts[by_id[i].tier] > 1]
        if not donors:
            chosen.append(best)
            continue
        worst = max(donors, key=rank)
        chosen[chosen.index(worst)] = best
    return chosen


# ---------------------------------------------------------------------------
# Fusion model
# ---------------------------------------------------------------------------


def _server_layout(dims=FEATURE_DIMS, fusion=FUSION_DIM, hidden=64, classes=N_CLASSES):
    shapes = []
    for t, d in zip(TIERS, dims):
        shapes += [(f"P{t.label}", (d, fusion)), (f"c{t.label}", (fusion,))]
    shapes += [("W1", (fusion, hidden)), ("b1", (hidden,)), ("W2", (hidden, classes)), ("b2", (classes,))]
    return shapes


@dataclass
class ServerModel:
    flat: np.ndarray
    dims: tuple[int, int, int] = FEATURE_DIMS
    teacher: np.ndarray | None = None

    def views(self, flat=None) -> dict[str, np.ndarray]:
        flat = self.flat if flat is None else flat
        out, pos = {}, 0
        for name, shape in _server_layout(self.dims):
            size = int(np.prod(shape))
            out[name] = flat[pos : pos + size].reshape(shape)
            pos += size
        return out

    def copy(self) -> "ServerModel":
        t = None if self.teacher is None else self.teacher.copy()
        return ServerModel(self.flat.copy(), self.dims, t)


def server_param_count(dims=FEATURE_DIMS) -> int:
    return sum(int(np.prod(s)) for _, s in _server_layout(dims))


def init_server(rng: np.random.Generator, dims=FEATURE_DIMS) -> ServerModel:
    flat = np.zeros(server_param_count(dims))
    model = ServerModel(flat, tuple(dims))
    v = model.views()
    for name, arr in v.items():
        if arr.ndim == 2:
            arr[...] = rng.normal(0.0, math.sqrt(2.0 / arr.shape[0]), size=arr.shape)
    return model


def _project(v, tier: QualityTier, feats):
    return feats @ v[f"P{tier.label}"] + v[f"c{tier.label}"]


def fused_vector(features, tier, weights: QualityWeights, model: ServerModel, flat=None) -> np.ndarray:
    tier = QualityTier.parse(tier)
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if f.shape[1] != model.dims[tier]:
        raise ValueError(f"{tier.label} features must have dim {model.dims[tier]}, got {f.shape[1]}")
    return weights[tier] * _project(model.views(flat), tier, f)


def _head(v, z):
    a = z @ v["W1"] + v["b1"]
    h = np.maximum(a, 0.0)
    return h @ v["W2"] + v["b2"], h


def fuse(features, tier, weights: QualityWeights, model: ServerModel, flat=None) -> np.ndarray:
    """Logits for one tier's features (a vector or a batch)."""
    z = fused_vector(features, tier, weights, model, flat)
    logits, _ = _head(model.views(flat), z)
    return logits[0] if np.ndim(features) == 1 else logits


@dataclass
class ServerBatch:
    features: dict[QualityTier, np.ndarray]
    labels: dict[QualityTier, np.ndarray]

    @property
    def size(self) -> int:
        return sum(len(y) for y in self.labels.values())


def collect(packets: list[FeaturePacket]) -> ServerBatch:
    feats: dict = {}
    labels: dict = {}
    for p in packets:
        if p.skipped or p.n_entries == 0:
            continue
        feats.setdefault(p.tier, []).append(dequantize(p).astype(np.float64))
        labels.setdefault(p.tier, []).append(np.asarray(p.labels, dtype=np.int64))
    return ServerBatch(
        {t: np.concatenate(v) for t, v in feats.items()}, {t: np.concatenate(v) for t, v in labels.items()}
    )


def kd_terms(student_logits, teacher_logits, labels, kd_alpha: float, temperature: float):
    """Per-sample loss and its gradient w.r.t. the student logits.

    loss = (1 - a) CE(y, s) + a T^2 KL(softmax(t/T) || softmax(s/T)).
    """
    n = len(labels)
    lp = log_softmax(student_logits)
    loss = -(1.0 - kd_alpha) * lp[np.arange(n), labels]
    d = softmax(student_logits)
    d[np.arange(n), labels] -= 1.0
    d *= 1.0 - kd_alpha
    if teacher_logits is not None and kd_alpha > 0:
        T = temperature
        pt = softmax(teacher_logits / T)
        ls = log_softmax(student_logits / T)
        lt = np.log(np.maximum(pt, 1e-300))
        loss = loss + kd_alpha * T * T * (pt * (lt - ls)).sum(axis=1)
        d += kd_alpha * T * (np.exp(ls) - pt)
    return loss, d


def kl_divergence(teacher_logits, student_logits, temperature: float) -> np.ndarray:
    pt = softmax(np.asarray(teacher_logits, dtype=np.float64) / temperature)
    ls = log_softmax(np.asarray(student_logits, dtype=np.float64) / temperature)
    return (pt * (np.log(np.maximum(pt, 1e-300)) - ls)).sum(axis=-1)


def _loss_grad(flat, model, tier, f, y, weights, teacher, kd_alpha, temperature, scale_by_weight):
    v = model.views(flat)
    w = weights[tier]
    p = _project(v, tier, f)
    z = w * p
    logits, h = _head(v, z)
    t_logits = None
    if teacher is not None:
        tv = model.views(teacher)
        t_logits, _ = _head(tv, w * _project(tv, tier, f))
    per, dlog = kd_terms(logits, t_logits, y, kd_alpha, temperature)
    s = w if scale_by_weight else 1.0
    per = s * per
    dlog = s * dlog
    grad = np.zeros_like(flat)
    g = model.views(grad)
    g["W2"] += h.T @ dlog
    g["b2"] += dlog.sum(axis=0)
    dh = (dlog @ v["W2"].T) * (h > 0)
    g["W1"] += z.T @ dh
    g["b1"] += dh.sum(axis=0)
    dz = dh @ v["W1"].T
    dp = w * dz
    g[f"P{tier.label}"] += f.T @ dp
    g[f"c{tier.label}"] += dp.sum(axis=0)
    return per, grad


def _weight_total(weights, tier_ids) -> float:
    """Sum of the source-tier weights of a batch; the weighted-mean denominator."""
    total = sum(weights[int(t)] * c for t, c in zip(*np.unique(tier_ids, return_counts=True)))
    return float(total) if total > 0 else float(len(tier_ids))


def server_loss_and_grad(model, batch: ServerBatch, weights, kd_alpha=0.5, temperature=2.0, scale_by_weight=True):
    """Weighted-mean loss over all samples in ``batch`` and its gradient (used by tests)."""
    total = 0.0
    grad = np.zeros_like(model.flat)
    ids = np.concatenate([np.full(len(y), int(t)) for t, y in batch.labels.items()])
    n = _weight_total(weights, ids) if scale_by_weight else len(ids)
    for tier, f in batch.features.items():
        per, g = _loss_grad(
            model.flat, model, tier, f, batch.labels[tier], weights, model.teacher, kd_alpha, temperature,
            scale_by_weight,
        )
        total += per.sum()
        grad += g
    return total / n, grad / n


@dataclass
class TrainMetrics:
    loss: float
    n_samples: int
    steps: int


def train_server(
    model: ServerModel,
    packets: list[FeaturePacket],
    weights: QualityWeights,
    kd_alpha: float = 0.5,
    temperature: float = 2.0,
    epochs: int = 5,
    rng: np.random.Generator | None = None,
    batch_size: int = 64,
    lr: float = 0.05,
    momentum: float = 0.9,
    scale_by_weight: bool = True,
) -> tuple[ServerModel, TrainMetrics]:
    """Minibatch SGD on the pooled packets; the model's teacher stays frozen."""
    batch = collect(packets)
    if batch.size == 0:
        raise ValueError("no features to train on")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    tiers = np.concatenate([np.full(len(y), int(t)) for t, y in batch.labels.items()])
    local = np.concatenate([np.arange(len(y)) for y in batch.labels.values()])
    flat = model.flat.copy()
    velocity = np.zeros_like(flat)
    steps, losses = 0, []
    for _ in range(epochs):
        order = rng.permutation(len(tiers))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            grad = np.zeros_like(flat)
            loss = 0.0
            denom = _weight_total(weights, tiers[idx]) if scale_by_weight else len(idx)
            for t in np.unique(tiers[idx]):
                tier = QualityTier(int(t))
                rows = local[idx[tiers[idx] == t]]
                per, g = _loss_grad(
                    flat, model, tier, batch.features[tier][rows], batch.labels[tier][rows], weights,
                    model.teacher, kd_alpha, temperature, scale_by_weight,
                )
                loss += per.sum()
                grad += g
            grad /= denom
            velocity = momentum * velocity + grad
            flat -= lr * velocity
            losses.append(loss / denom)
            steps += 1
    trained = ServerModel(flat, model.dims, model.teacher)
    return trained, TrainMetrics(float(np.mean(losses[-max(1, len(losses) // epochs) :])), batch.size, steps)


def apply_momentum(theta_t, theta_prev, beta: float = 0.9):
    """theta_t + beta (theta_t - theta_prev); accepts arrays, scalars or ServerModels."""
    if isinstance(theta_t, ServerModel):
        return ServerModel(apply_momentum(theta_t.flat, theta_prev.flat, beta), theta_t.dims, theta_t.teacher)
    a, b = np.asarray(theta_t, dtype=np.float64), np.asarray(theta_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    out = a + beta * (a - b)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class DegradedTestSet:
    """Test images degraded once per tier and cached."""

    def __init__(self, images, labels, seed_fn, config: DegradationConfig | None = None):
        self.images = np.asarray(images)
        self.labels = np.asarray(labels)
        self._seed_fn = seed_fn
        self._config = config
        self._cache: dict[QualityTier, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.labels)

    def for_tier(self, tier) -> np.ndarray:
        tier = QualityTier.parse(tier)
        if tier not in self._cache:
            self._cache[tier] = degrade(self.images, tier, self._seed_fn(tier), self._config).astype(np.float32)
        return self._cache[tier]


def tier_logits(model, weights, test_set: DegradedTestSet, extractors: dict, clip_norms=None) -> dict:
    """Per-tier logits; ``clip_norms`` applies the upload clipping to test features."""
    out = {}
    for tier, params in extractors.items():
        tier = QualityTier.parse(tier)
        feats = extract_features(params, test_set.for_tier(tier))
        if clip_norms is not None:
            feats = clip_features(feats, clip_norms[tier])
        out[tier] = fuse(feats, tier, weights, model)
    return out


def _vote(weights, logits: dict, labels) -> float:
    total = sum(weights[t] * z for t, z in logits.items())
    return float((np.argmax(total, axis=1) == labels).mean())


def evaluate_server(
    model: ServerModel,
    weights: QualityWeights,
    test_set: DegradedTestSet,
    eval_extractors: dict[QualityTier, ModelParams],
    only_tier=None,
    clip_norms=None,
) -> float:
    """Top-1 accuracy of the weighted logit sum across available tier pipelines."""
    if not eval_extractors:
        raise ValueError("no evaluation extractors available")
    if only_tier is not None:
        tier = QualityTier.parse(only_tier)
        eval_extractors = {tier: eval_extractors[tier]}
    logits = tier_logits(model, weights, test_set, eval_extractors, clip_norms)
    return _vote(weights, logits, test_set.labels)


def evaluate_breakdown(model, weights, test_set, eval_extractors, clip_norms=None) -> tuple[float, dict]:
    """Fused accuracy plus each tier pipeline on its own, sharing one feature pass."""
    if not eval_extractors:
        raise ValueError("no evaluation extractors available")
    logits = tier_logits(model, weights, test_set, eval_extractors, clip_norms)
    single = {t: _vote(weights, {t: z}, test_set.labels) for t, z in logits.items()}
    return _vote(weights, logits, test_set.labels), single
