"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (collected in the terminal summary) and
then asserts, so a failing criterion both prints its numbers and fails.
Full MNIST runs are shared between criteria through module fixtures.
"""

import dataclasses
import math
import time

import mpmath
import numpy as np
import pytest

from qahfl.client import compress, extract_features, new_client
from qahfl.datasets import load_mnist_idx, mnist_paths
from qahfl.device import battery_impact, default_profiles
from qahfl.imaging import batch_psnr, degrade
from qahfl.nn import init_params, spec_for
from qahfl.orchestrator import RunConfig, build_plan, export_metrics, load_data, run_federation
from qahfl.privacy import round_epsilon
from qahfl.secagg import SecureAggregationAborted, encode_fixed, fixed_sum, secure_sum
from qahfl.seeding import seed_tree
from qahfl.server import QualityWeights, apply_momentum, update_quality_weights
from qahfl.verify import gradient_error
from test_nn import LAYER_CASES

from conftest import requires_mnist

mpmath.mp.dps = 50
# one-sided 95% quantile of Student's t with 4 degrees of freedom
T95_DF4 = 2.131846786326649


def _rel(got, want):
    want = mpmath.mpf(want)
    return float(abs(mpmath.mpf(got) - want) / max(abs(want), mpmath.mpf("1e-300")))


def test_criterion_01_formula_oracles(report_criterion):
    r = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = {}
    errs = []
    for _ in range(100):
        p, t, cap = r.uniform(0, 5000), r.uniform(0, 3), r.uniform(500, 6000)
        want = mpmath.mpf(p) * mpmath.mpf(t) / (mpmath.mpf(cap) * mpmath.mpf("3.7")) * 100
        errs.append(_rel(battery_impact(p, t, cap), want))
    worst["battery"] = max(errs)
    errs = []
    for _ in range(100):
        n, s, d = int(r.integers(1, 5000)), r.uniform(0.1, 5), 10 ** r.uniform(-9, -2)
        want = 2 * mpmath.sqrt(2 * mpmath.log(mpmath.mpf("1.25") / mpmath.mpf(d))) / (n * mpmath.mpf(s))
        errs.append(_rel(round_epsilon(n, s, d), want))
    worst["epsilon"] = max(errs)
    errs = []
    for _ in range(100):
        w, acc, a = r.uniform(0.01, 1, 3), r.uniform(0.01, 1, 3), r.uniform(0, 1)
        got = update_quality_weights(QualityWeights(*w), list(acc), a).as_tuple()
        for g, wi, ai in zip(got, w, acc):
            want = mpmath.mpf(a) * mpmath.mpf(wi) + (1 - mpmath.mpf(a)) * mpmath.mpf(ai)
            errs.append(_rel(g, min(1, max(0, want))))
    worst["weights"] = max(errs)
    errs = []
    for _ in range(100):
        th, prev, b = r.normal(size=4), r.normal(size=4), r.uniform(0, 1)
        got = apply_momentum(th, prev, b)
        for g, x, y in zip(got, th, prev):
            want = mpmath.mpf(x) + mpmath.mpf(b) * (mpmath.mpf(x) - mpmath.mpf(y))
            # the oracle can cancel to ~0; compare against the term scale there
            scale = max(abs(want), abs(mpmath.mpf(x)) + abs(mpmath.mpf(b) * (mpmath.mpf(x) - mpmath.mpf(y))))
            errs.append(float(abs(mpmath.mpf(g) - want) / scale))
    worst["momentum"] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-9 and elapsed < 1.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report_criterion(1, ok, f"max relative error {detail}; {elapsed:.2f} s")
    assert ok


def test_criterion_02_gradients(report_criterion):
    t0 = time.perf_counter()
    errs = {name: gradient_error(spec, seed=11, mu=0.05, l2=0.01) for name, spec in LAYER_CASES.items()}
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = max(errs.values()) <= 1e-4 and elapsed < 30
    report_criterion(2, ok, f"{len(errs)} nets, worst {worst} {errs[worst]:.1e} (with prox and l2); {elapsed:.1f} s")
    assert ok


@requires_mnist
def test_criterion_03_psnr(report_criterion):
    t0 = time.perf_counter()
    x = load_mnist_idx(*mnist_paths(None, "train"), limit=1000).images
    low = float(batch_psnr(x, degrade(x, "low", np.random.default_rng(0))).mean())
    med = float(batch_psnr(x, degrade(x, "medium", np.random.default_rng(0))).mean())
    elapsed = time.perf_counter() - t0
    ok = 14 <= low <= 19 and 16 <= med <= 22 and low < med and elapsed < 20
    report_criterion(3, ok, f"PSNR low {low:.2f} dB (band 14-19), medium {med:.2f} dB (band 16-22); {elapsed:.1f} s")
    assert ok


def test_criterion_04_secure_aggregation(report_criterion):
    r = np.random.default_rng(4)
    t0 = time.perf_counter()
    exact = aborted = wrong = 0
    for _ in range(200):
        n = int(r.integers(10, 51))
        vecs = [r.uniform(-1, 1, 64) for _ in range(n)]
        k = int(r.integers(0, math.floor(0.4 * n) + 1))
        dropped = set(r.choice(n, k, replace=False).tolist())
        over = k > 0.3 * n
        try:
            out = secure_sum(vecs, dropped, 0.3, r)
        except SecureAggregationAborted:
            aborted += over
            wrong += not over
            continue
        plain = fixed_sum([encode_fixed(v) for i, v in enumerate(vecs) if i not in dropped])
        if over or not np.array_equal(out, plain):
            wrong += 1
        else:
            exact += 1
    elapsed = time.perf_counter() - t0
    ok = wrong == 0 and elapsed < 10
    report_criterion(4, ok, f"{exact} bit-exact, {aborted} aborts above 30%, {wrong} wrong; {elapsed:.1f} s")
    assert ok


@requires_mnist
def test_criterion_05_compression(report_criterion):
    t0 = time.perf_counter()
    cfg = RunConfig()
    train, _ = load_data(dataclasses.replace(cfg, n_test=1))
    plan = build_plan(cfg, train)
    profiles = default_profiles()
    ratios, worst_bytes = {0: [], 1: [], 2: []}, 0
    models = {t: init_params(spec_for(t), seed_tree(0, "init", t.label), np.float32) for t in profiles}
    for c in plan.clients:
        state = new_client(c, profiles[c.tier], spec_for(c.tier), np.random.default_rng(c.client_id), models[c.tier])
        pkt = compress(extract_features(state), cfg.compression_targets, np.random.default_rng(c.client_id))
        ratios[int(c.tier)].append(pkt.compression_ratio)
        worst_bytes = max(worst_bytes, pkt.bytes_wire)
    elapsed = time.perf_counter() - t0
    off = [
        max(abs(x - tgt) / tgt for x in ratios[t]) for t, tgt in zip(range(3), cfg.compression_targets)
    ]
    ok = max(off) <= 0.10 and worst_bytes <= 1_000_000 and elapsed < 20
    mean = [np.mean(ratios[t]) for t in range(3)]
    report_criterion(
        5, ok,
        f"mean ratios {mean[0]:.4f}/{mean[1]:.4f}/{mean[2]:.4f}, worst deviation {max(off):.1%}, "
        f"largest packet {worst_bytes / 1e6:.3f} MB; {elapsed:.1f} s",
    )
    assert ok


@pytest.fixture(scope="module")
def mnist_data():
    if not __import__("qahfl.datasets").datasets.mnist_available():
        pytest.skip("MNIST IDX files not found")
    return load_data(RunConfig())


def _timed_run(cfg, data):
    t0 = time.perf_counter()
    ledgers = run_federation(cfg, data)
    return ledgers, time.perf_counter() - t0


@pytest.fixture(scope="module")
def standard_run(mnist_data):
    return _timed_run(RunConfig(), mnist_data)


@pytest.fixture(scope="module")
def private_run(mnist_data):
    return _timed_run(RunConfig(privacy=True), mnist_data)


def test_criterion_06_standard_mode(standard_run, report_criterion):
    ledgers, elapsed = standard_run
    last = ledgers[-1]
    single = {t.label: a for t, a in last.single_tier_accuracy.items()}
    per_client = max(led.bytes_per_client for led in ledgers)
    ok = (
        last.server_accuracy >= 0.80
        and all(last.server_accuracy > a for a in single.values())
        and len(single) == 3
        and per_client <= 1_000_000
        and elapsed <= 600
    )
    singles = ", ".join(f"{k} {v:.4f}" for k, v in single.items())
    report_criterion(
        6, ok,
        f"final accuracy {last.server_accuracy:.4f} (single tiers {singles}); "
        f"max bytes/client {per_client / 1e6:.3f} MB; {elapsed:.0f} s",
    )
    assert ok


def test_criterion_07_privacy_mode(private_run, standard_run, report_criterion):
    ledgers, elapsed = private_run
    acc = ledgers[-1].server_accuracy
    std = standard_run[0][-1].server_accuracy
    caps = {"low": 2.0, "mid": 4.0, "high": 8.0}
    rows = [row for led in ledgers for row in led.privacy_rows]
    over = [r for r in rows if r["eps_total"] > caps[r["tier"]]]
    top = {t: max(r["eps_total"] for r in rows if r["tier"] == t) for t in caps}
    ok = 0.15 <= acc < std and rows and not over and elapsed <= 600
    report_criterion(
        7, ok,
        f"private accuracy {acc:.4f} vs standard {std:.4f}; max eps_total "
        f"{top['low']:.4f}/{top['mid']:.4f}/{top['high']:.4f} (caps 2/4/8); {elapsed:.0f} s",
    )
    assert ok


def test_criterion_08_ablation_direction(report_criterion):
    t0 = time.perf_counter()
    acc = {(): [], ("weighted_aggregation",): [], ("quality_partition",): []}
    for seed in range(5):
        base = RunConfig(dataset="synthetic", synthetic_n=1000, rounds=2, master_seed=seed)
        data = load_data(base)
        for flags in acc:
            acc[flags].append(run_federation(dataclasses.replace(base, ablate=flags), data)[-1].server_accuracy)
    elapsed = time.perf_counter() - t0
    full = np.array(acc[()])
    parts, ok = [], elapsed <= 300
    for flags in list(acc)[1:]:
        d = np.array(acc[flags]) - full
        noise = T95_DF4 * d.std(ddof=1) / math.sqrt(len(d))
        ok &= d.mean() <= noise
        parts.append(f"without {flags[0]} mean change {d.mean():+.4f} (noise bound {noise:.4f})")
    report_criterion(8, ok, f"full mean {full.mean():.4f}; " + "; ".join(parts) + f"; {elapsed:.0f} s")
    assert ok


def test_criterion_09_determinism(standard_run, mnist_data, tmp_path, report_criterion):
    first, t6 = standard_run
    second, elapsed = _timed_run(RunConfig(), mnist_data)
    export_metrics(first, tmp_path / "a", RunConfig())
    export_metrics(second, tmp_path / "b", RunConfig())
    names = ("rounds.csv", "clients.csv", "privacy.csv")
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    ok = all(same) and elapsed <= 2 * max(t6, 1.0)
    report_criterion(9, ok, f"identical files {sum(same)}/3; repeat run {elapsed:.0f} s vs {t6:.0f} s")
    assert ok


def test_criterion_10_monotone_privacy(report_criterion):
    sizes = (1, 50, 300, 5000)
    ok = all(round_epsilon(n, 1.1, 1e-5) > round_epsilon(n, 1.3, 1e-5) > round_epsilon(n, 1.5, 1e-5) for n in sizes)
    e = [round_epsilon(300, s, 1e-5) for s in (1.1, 1.3, 1.5)]
    report_criterion(10, ok, f"eps at |D|=300: {e[0]:.5f} > {e[1]:.5f} > {e[2]:.5f}")
    assert ok
