"""Command-line front end: run scenarios, compare protocols, validate files."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, engine, metrics
from .scenario import ScenarioError, build_scenario, load_scenario


def _load(path: str, cycles: int | None, ac_hz: int | None, protocol: str | None = None):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if cycles is not None:
        doc["cycle_limit"] = cycles
    if ac_hz is not None:
        doc["ac_hz"] = ac_hz
    if protocol is not None:
        doc["protocol"] = protocol
    return build_scenario(doc, name=path)


def _provenance(scenario, seed: int) -> str:
    return (f"plcsim {__version__}\nscenario_hash {scenario.content_hash()}\n"
            f"seed {seed}")


def _single_run(args):
    path, cycles, ac_hz, protocol, seed = args
    scenario = _load(path, cycles, ac_hz, protocol)
    result = engine.run(scenario, seed)
    stats = metrics.fold(result.trace.rows, protocol=scenario.protocol, seed=seed)
    return metrics.summarize(stats, scenario.ac_hz, result.cycle_limit)


def cmd_run(args) -> int:
    scenario = _load(args.scenario, args.cycles, args.ac_hz)
    result = engine.run(scenario, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.csv"
    trace_path.write_bytes(result.trace.to_csv_bytes(_provenance(scenario, args.seed)))
    stats = metrics.fold(result.trace.rows, protocol=scenario.protocol, seed=args.seed)
    summary = metrics.summarize(stats, scenario.ac_hz, result.cycle_limit)
    summary["tool_version"] = __version__
    summary["scenario_hash"] = scenario.content_hash()
    summary["trace_sha256"] = result.trace.sha256()
    summary["scenario"] = scenario.echo
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2)
                                      + "\n")
    print(f"wrote {trace_path} ({len(result.trace.rows)} events) and summary.json")
    return 0


def cmd_compare(args) -> int:
    protocols = args.protocols.split(",")
    if len(protocols) != 2:
        print("compare needs exactly two protocols (e.g. proximity,sender-only)",
              file=sys.stderr)
        return 2
    if args.seeds < 1:
        print("need at least one seed", file=sys.stderr)
        return 2
    proto_a, proto_b = protocols
    seeds = [args.seed_base + i for i in range(args.seeds)]
    jobs = [(args.scenario, args.cycles, args.ac_hz, proto, seed)
            for seed in seeds for proto in (proto_a, proto_b)]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            summaries = list(pool.map(_single_run, jobs))
    else:
        summaries = [_single_run(job) for job in jobs]
    scenario = _load(args.scenario, args.cycles, args.ac_hz)
    shash = scenario.content_hash()

    rows = []
    wins: dict[str, list[int]] = {m: [0, 0, 0] for m in metrics.COMPARE_METRICS}
    for i, seed in enumerate(seeds):
        summary_a, summary_b = summaries[2 * i], summaries[2 * i + 1]
        for metric, va, vb, delta in metrics.compare(summary_a, summary_b, shash, shash):
            rows.append((metric, seed, va, vb, delta))
            slot = 2 if delta == 0 else (0 if _wins_a(metric, delta) else 1)
            wins[metric][slot] += 1

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["# plcsim", __version__, "scenario_hash", shash,
                         "protocol_a", proto_a, "protocol_b", proto_b])
        writer.writerow(["metric", "seed", "value_a", "value_b", "delta"])
        for metric, seed, va, vb, delta in rows:
            writer.writerow([metric, seed, repr(va), repr(vb), repr(delta)])
        writer.writerow(["metric", "wins_a", "wins_b", "ties", ""])
        for metric, (wa, wb, ties) in wins.items():
            writer.writerow([metric, wa, wb, ties, ""])
    print(f"wrote {out} ({len(seeds)} seeds, {proto_a} vs {proto_b})")
    return 0


def _wins_a(metric: str, delta: float) -> bool:
    # delta = b - a; for cost metrics a lower value wins.
    lower_is_better = metric in ("mean_slots_per_delivered", "lost", "slots_transmitted")
    return (delta > 0) if lower_is_better else (delta < 0)


def cmd_validate(args) -> int:
    scenario = load_scenario(args.scenario)
    print(f"{args.scenario}: valid ({len(scenario.topology.addresses())} nodes, "
          f"protocol {scenario.protocol}, hash {scenario.content_hash()[:12]})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plcsim",
                                     description="Power-line LAN protocol simulator")
    parser.add_argument("--version", action="version", version=f"plcsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one scenario and write artifacts")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--seed", type=int, default=1)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--cycles", type=int, default=None)
    p_run.add_argument("--ac-hz", type=int, default=None, dest="ac_hz")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="paired protocol comparison over seeds")
    p_cmp.add_argument("--scenario", required=True)
    p_cmp.add_argument("--seeds", type=int, required=True)
    p_cmp.add_argument("--seed-base", type=int, default=1)
    p_cmp.add_argument("--protocols", required=True,
                       help="two comma-separated protocol names")
    p_cmp.add_argument("--out", default="comparison.csv")
    p_cmp.add_argument("--cycles", type=int, default=None)
    p_cmp.add_argument("--ac-hz", type=int, default=None, dest="ac_hz")
    p_cmp.add_argument("--parallel", type=int, default=1,
                       help="run seeds concurrently with this many workers")
    p_cmp.set_defaults(func=cmd_compare)

    p_val = sub.add_parser("validate", help="check a scenario file")
    p_val.add_argument("--scenario", required=True)
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
