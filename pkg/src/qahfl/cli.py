"""Command line: ``qahfl partition|run|report|verify``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from qahfl.orchestrator import (
    ABLATION_FLAGS,
    ConfigError,
    RunConfig,
    build_plan,
    export_metrics,
    load_data,
    resolve_seed,
    run_federation,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qahfl", description="Quality-aware hierarchical federated learning simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="master seed (QAHFL_SEED overrides)")
        sp.add_argument("--dataset", choices=("mnist", "synthetic"))

    part = sub.add_parser("partition", help="build and inspect a federation plan")
    common(part)
    part.add_argument("--out", help="write the plan as JSON here")

    run = sub.add_parser("run", help="run a full federation")
    common(run)
    run.add_argument("--privacy", choices=("on", "off"))
    run.add_argument("--rounds", type=int)
    run.add_argument("--out", default="runs/latest", help="output directory (default: %(default)s)")
    run.add_argument("--ablate", default="", help="comma list of: " + ", ".join(ABLATION_FLAGS))

    rep = sub.add_parser("report", help="summarise a run directory")
    rep.add_argument("run_dir")

    sub.add_parser("verify", help="run the built-in invariant checks")
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.dataset:
        changes["dataset"] = args.dataset
    if getattr(args, "privacy", None):
        changes["privacy"] = args.privacy == "on"
    if getattr(args, "rounds", None) is not None:
        changes["rounds"] = args.rounds
    ablate = [a.strip() for a in getattr(args, "ablate", "").split(",") if a.strip()]
    if ablate:
        changes["ablate"] = tuple(dict.fromkeys(cfg.ablate + tuple(ablate)))
    try:
        changes["master_seed"] = resolve_seed(cfg.master_seed, args.seed)
    except ValueError as exc:
        raise ConfigError(f"bad QAHFL_SEED: {exc}") from exc
    return dataclasses.replace(cfg, **changes)


def cmd_partition(args) -> int:
    cfg = _config(args)
    train, _ = load_data(cfg)
    plan = build_plan(cfg, train)
    print(f"{'client':>6} {'tier':>5} {'size':>5}  primary   histogram")
    for c in plan.clients:
        prim = ",".join(map(str, c.primary_classes))
        print(f"{c.client_id:>6} {c.tier.label:>5} {c.size:>5}  {prim:<8}  {c.class_histogram().tolist()}")
    counts = {t.label: n for t, n in plan.tier_counts().items()}
    print(f"tiers {counts}  gini {plan.gini:.4f}")
    if args.out:
        plan.export_json(args.out)
        print(f"plan written to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    ledgers = run_federation(cfg)
    export_metrics(ledgers, args.out, cfg)
    for led in ledgers:
        print(f"round {led.round}: accuracy {led.server_accuracy:.4f}  bytes/client {led.bytes_per_client / 1e6:.4f} MB")
    print(f"metrics written to {args.out}")
    return EXIT_OK


def _read(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v, fmt=".4f"):
    return format(float(v), fmt) if v not in ("", None) else "-"


def cmd_report(args) -> int:
    d = Path(args.run_dir)
    rounds = _read(d / "rounds.csv")
    privacy = _read(d / "privacy.csv")
    print("Server performance and quality weights")
    print(f"{'round':>5} {'accuracy':>9} {'w_low':>7} {'w_mid':>7} {'w_high':>7}")
    for r in rounds:
        print(f"{r['round']:>5} {_num(r['accuracy']):>9} {_num(r['w_low']):>7} {_num(r['w_mid']):>7} {_num(r['w_high']):>7}")
    print("\nCommunication")
    print(f"{'round':>5} {'total MB':>9} {'per client MB':>14} {'selected':>9}")
    for r in rounds:
        total = float(r["bytes_total"]) / 1e6
        per = float(r["bytes_per_client"]) / 1e6
        print(f"{r['round']:>5} {total:>9.4f} {per:>14.4f} {r['n_selected']:>9}")
    if privacy:
        last = max(int(p["round"]) for p in privacy)
        print(f"\nPrivacy after round {last}")
        print(f"{'tier':>5} {'clients':>8} {'mean eps':>9} {'max eps':>8} {'exhausted':>9}")
        for tier in ("low", "mid", "high"):
            rows = [p for p in privacy if int(p["round"]) == last and p["tier"] == tier]
            if not rows:
                continue
            eps = [float(p["eps_total"]) for p in rows]
            ex = sum(int(p["exhausted"]) for p in rows)
            print(f"{tier:>5} {len(rows):>8} {sum(eps) / len(eps):>9.4f} {max(eps):>8.4f} {ex:>9}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from qahfl.verify import run_checks

    ok = True
    for name, passed, detail in run_checks():
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {"partition": cmd_partition, "run": cmd_run, "report": cmd_report, "verify": cmd_verify}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
