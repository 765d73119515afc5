import dataclasses
import json

import numpy as np
import pytest

import qahfl.client as client_mod
from qahfl.cli import main
from qahfl.imaging import TIERS
from qahfl.orchestrator import (
    ABLATION_FLAGS,
    ABLATION_ROWS,
    CLIENT_COLUMNS,
    PRIVACY_COLUMNS,
    ROUND_COLUMNS,
    ConfigError,
    RunConfig,
    ablation_config,
    export_metrics,
    load_data,
    resolve_seed,
    run_federation,
)


def small(**kw):
    base = dict(dataset="synthetic", synthetic_n=600, synthetic_test_n=200, n_clients=6, rounds=2)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def data():
    return load_data(small())


@pytest.fixture(scope="module")
def ledgers(data):
    return run_federation(small(), data)


# -- config -----------------------------------------------------------------


def test_defaults():
    c = RunConfig()
    assert (c.rounds, c.selection_fraction, c.n_clients, c.tier_fractions) == (3, 0.8, 20, (0.3, 0.4, 0.3))
    assert (c.alpha, c.beta, c.kd_alpha, c.temperature) == (0.3, 0.9, 0.5, 2.0)
    assert c.initial_weights == (0.6, 0.8, 1.0)
    assert c.mu_by_tier == (0.01, 0.005, 0.003)
    p = RunConfig(privacy=True).privacy_config()
    assert p.enabled and p.sigma_by_tier == (1.1, 1.3, 1.5) and p.delta == 1e-5


@pytest.mark.parametrize(
    "kw",
    [
        dict(ablate=("bogus",)),
        dict(dataset="cifar"),
        dict(rounds=-1),
        dict(selection_fraction=0),
        dict(tier_fractions=(0.5, 0.5, 0.5)),
        dict(delta=2.0),
        dict(initial_weights=(0.5, 0.5, 1.5)),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_config_roundtrip(tmp_path):
    c = RunConfig(privacy=True, ablate=("fedprox",), master_seed=9)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(c.to_dict()))
    assert RunConfig.load(path) == c
    path.write_text(json.dumps({"no_such_key": 1}))
    with pytest.raises(ConfigError):
        RunConfig.load(path)


def test_seed_precedence():
    assert resolve_seed(1, None, {}) == 1
    assert resolve_seed(1, 2, {}) == 2
    assert resolve_seed(1, 2, {"QAHFL_SEED": "3"}) == 3


def test_ablation_table_complete():
    covered = {f for _, _, _, flags in ABLATION_ROWS for f in flags}
    assert covered == set(ABLATION_FLAGS)
    for suite in ("standard", "privacy"):
        combos = [(p, flags) for s, _, p, flags in ABLATION_ROWS if s == suite]
        assert len(combos) == len(set(combos))
    for _, name, private, flags in ABLATION_ROWS:
        cfg = ablation_config(name)
        assert cfg.privacy == private and cfg.ablate == flags
    with pytest.raises(KeyError):
        ablation_config("nope")


def test_flag_effects():
    assert not RunConfig(privacy=True, ablate=("privacy",)).privacy_config().enabled
    u = RunConfig(privacy=True, ablate=("quality_calibrated_privacy",)).privacy_config()
    assert len(set(u.sigma_by_tier)) == 1


# -- round loop ---------------------------------------------------------------


def test_zero_rounds():
    assert run_federation(small(rounds=0)) == []


def test_round_structure(ledgers):
    assert [led.round for led in ledgers] == [1, 2]
    for led in ledgers:
        assert len(led.selection.selected) == 5
        assert {c.tier for c in led.clients} == set(TIERS)
        assert 0.0 <= led.server_accuracy <= 1.0
        wire = sum(c.bytes_wire for c in led.clients if not c.dropped)
        assert led.bytes_total == wire + led.eval_bytes
    assert ledgers[0].weights.as_tuple() == (0.6, 0.8, 1.0)
    assert ledgers[1].weights.as_tuple() != (0.6, 0.8, 1.0)


def test_bytes_conservation_without_eval_path(data):
    for led in run_federation(small(rounds=1, count_eval_bytes=False), data):
        assert led.eval_bytes == 0
        assert led.bytes_total == sum(c.bytes_wire for c in led.clients)


def test_fedprox_ablation_zeroes_mu(data, monkeypatch):
    mus = []
    real = client_mod.loss_and_grad

    def spy(params, x, y, prev, mu, l2, rng):
        mus.append(mu)
        return real(params, x, y, prev, mu, l2, rng)

    monkeypatch.setattr(client_mod, "loss_and_grad", spy)
    run_federation(small(ablate=("fedprox",)), data)
    assert set(mus) == {0.0}
    mus.clear()
    run_federation(small(), data)
    assert any(m > 0 for m in mus)


def test_privacy_budgets_and_exhaustion(data):
    cfg = small(rounds=3, privacy=True, max_eps_by_tier=(0.1, 0.2, 0.3))
    leds = run_federation(cfg, data)
    caps = dict(zip(("low", "mid", "high"), cfg.max_eps_by_tier))
    exhausted = set()
    for led in leds:
        assert not exhausted & set(led.selection.selected)
        for row in led.privacy_rows:
            assert row["eps_total"] <= caps[row["tier"]] + 1e-12
        exhausted |= {r["client_id"] for r in led.privacy_rows if r["exhausted"]}
    assert exhausted


def test_secure_agg_abort_is_recorded(data):
    leds = run_federation(small(rounds=2, dropout_rate=0.9), data)
    assert not all(led.secure_agg_ok for led in leds)
    assert len(leds) == 2


# -- export -------------------------------------------------------------------


def _headers(path):
    return path.read_text().splitlines()[0].split(",")


def test_export_headers_and_rows(ledgers, tmp_path):
    export_metrics(ledgers, tmp_path, small())
    assert _headers(tmp_path / "rounds.csv") == list(ROUND_COLUMNS)
    assert _headers(tmp_path / "clients.csv") == list(CLIENT_COLUMNS)
    assert _headers(tmp_path / "privacy.csv") == list(PRIVACY_COLUMNS)
    assert len((tmp_path / "rounds.csv").read_text().splitlines()) == 3
    doc = json.loads((tmp_path / "run.json").read_text())
    assert doc["summary"]["rounds"] == 2


def test_export_empty(tmp_path):
    export_metrics([], tmp_path)
    for name in ("rounds.csv", "clients.csv", "privacy.csv"):
        assert len((tmp_path / name).read_text().splitlines()) == 1


def test_run_json_reproduces_run(ledgers, data, tmp_path):
    export_metrics(ledgers, tmp_path / "a", small())
    cfg = RunConfig.from_dict(json.loads((tmp_path / "a" / "run.json").read_text())["config"])
    export_metrics(run_federation(cfg, data), tmp_path / "b", cfg)
    for name in ("rounds.csv", "clients.csv", "privacy.csv", "run.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# -- cli --------------------------------------------------------------------


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    d = small().to_dict()
    d["rounds"] = 1
    path.write_text(json.dumps(d))
    return path


def test_cli_run_and_report(cfg_file, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("QAHFL_SEED", raising=False)
    out = tmp_path / "run"
    code = main(["run", "--config", str(cfg_file), "--rounds", "2", "--privacy", "off", "--seed", "42", "--out", str(out)])
    assert code == 0
    assert len((out / "rounds.csv").read_text().splitlines()) == 3
    assert json.loads((out / "run.json").read_text())["config"]["master_seed"] == 42
    assert main(["report", str(out)]) == 0
    assert "Communication" in capsys.readouterr().out


def test_cli_ablate_tags_ledger(cfg_file, tmp_path):
    out = tmp_path / "abl"
    assert main(["run", "--config", str(cfg_file), "--ablate", "fedprox", "--out", str(out)]) == 0
    assert (out / "rounds.csv").read_text().splitlines()[1].endswith(",fedprox")


def test_cli_env_seed_wins(cfg_file, tmp_path, monkeypatch):
    monkeypatch.setenv("QAHFL_SEED", "7")
    out = tmp_path / "env"
    assert main(["run", "--config", str(cfg_file), "--seed", "3", "--out", str(out)]) == 0
    assert json.loads((out / "run.json").read_text())["config"]["master_seed"] == 7


def test_cli_partition(cfg_file, tmp_path, capsys):
    assert main(["partition", "--config", str(cfg_file), "--out", str(tmp_path / "plan.json")]) == 0
    assert "gini" in capsys.readouterr().out
    assert len(json.loads((tmp_path / "plan.json").read_text())["clients"]) == 6


def test_cli_exit_codes(cfg_file, tmp_path):
    assert main(["run", "--no-such-flag"]) == 1
    assert main([]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["run", "--config", str(cfg_file), "--ablate", "bogus"]) == 1
    assert main(["report", str(tmp_path / "nowhere")]) == 2


def test_cli_verify():
    assert main(["verify"]) == 0
