"""Command line front end.

    plantline validate <config>
    plantline run <config> [--scenario <file>] [--until <sim-seconds>]
    plantline report <log> <metric> [--csv <out>]
    plantline inject <verb> <target> [--broker <url>]

All concurrency lives in the engines; this module only parses arguments,
loads files and prints tables.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import config as config_mod
from .bus import Envelope, QOS_AT_LEAST_ONCE, make_bus
from .clock import Scheduler, WallClock
from .events import EventLog
from .harness import Supervisor, load_scenario
from .metrics import (
    ascii_table,
    compute_command_metrics,
    compute_op_runtime,
    compute_tof,
    render_distribution,
    tof_overall,
)

INJECT_VERBS = {
    "fault": "op_id",
    "clear": "resource",
    "run_operation": "op_id",
    "activate_routine": "routine_id",
    "deactivate_routine": "routine_id",
    "disconnect": "device",
    "reconnect": "device",
}


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        cfg = config_mod.load(args.config)
    except config_mod.ConfigError as exc:
        print(f"{args.config}: {len(exc.violations)} violation(s)")
        for v in exc.violations:
            print(f"  - {v}")
        return 2
    print(f"{args.config}: OK "
          f"({len(cfg.devices)} devices, {len(cfg.bindings)} actuators, "
          f"{len(cfg.resources)} resources, {len(cfg.operations)} operations, "
          f"{len(cfg.routines)} routines)")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = config_mod.load(args.config)
    except config_mod.ConfigError as exc:
        for v in exc.violations:
            print(f"error: {v}", file=sys.stderr)
        return 2
    sup = Supervisor(cfg, log_path=args.log)
    try:
        sup.boot()
    except Exception as exc:
        print(f"boot failed: {exc}", file=sys.stderr)
        return 1
    scenario = load_scenario(args.scenario) if args.scenario else None
    if cfg.clock_mode == "simulated":
        sup.run_scenario(scenario, until_s=args.until)
    else:
        if scenario:
            print("error: scenarios require the simulated clock", file=sys.stderr)
            return 2
        deadline = None if args.until is None else sup.clock.now_ms() + int(args.until * 1000)
        try:
            sup.scheduler.run_wall(deadline)
        except KeyboardInterrupt:
            pass
    sup.shutdown()
    print(f"run complete at t={sup.clock.now_ms()} ms, "
          f"{len(sup.log.records)} events logged"
          + (f" to {sup.log._path}" if sup.log._path else ""))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    try:
        records = EventLog.load(args.log)
    except (OSError, ValueError) as exc:
        print(f"cannot read log: {exc}", file=sys.stderr)
        return 1
    csv_rows: list[tuple] = []
    if args.metric == "tof":
        per_device = compute_tof(records)
        rows = []
        for device, dist in per_device.items():
            s = dist.summary()
            rows.append([device, str(s["count"]), f"{s['median_ms']}",
                         f"{s['p95_ms']}", f"{s['max_ms']}"])
            csv_rows.append((device, s["count"], s["median_ms"], s["p95_ms"], s["max_ms"]))
        print(ascii_table(["device", "n", "median_ms", "p95_ms", "max_ms"], rows))
        overall = tof_overall(records)
        if overall.samples:
            print(f"\noverall median: {overall.median:.1f} ms over {overall.count} samples")
    elif args.metric in ("motion", "completion", "fault-lockout"):
        metrics = compute_command_metrics(records)
        dist = {"motion": metrics.issuance_to_motion,
                "completion": metrics.completion,
                "fault-lockout": metrics.fault_lockout}[args.metric]
        print(render_distribution(dist))
        if metrics.orphans and args.metric == "completion":
            print(f"\norphan command tokens ({len(metrics.orphans)}): "
                  + ", ".join(metrics.orphans[:10])
                  + (" ..." if len(metrics.orphans) > 10 else ""))
        csv_rows = [(int(b), c) for b, c in dist.histogram()]
    elif args.metric == "op-runtime":
        report = compute_op_runtime(records)
        rows = []
        for op_id in sorted(report.per_op):
            s = report.per_op[op_id].summary()
            rows.append([op_id, str(s["count"]), f"{s['median_ms']}",
                         f"{s['min_ms']}", f"{s['max_ms']}"])
            csv_rows.append((op_id, s["count"], s["median_ms"], s["min_ms"], s["max_ms"]))
        print(ascii_table(["operation", "n", "median_ms", "min_ms", "max_ms"], rows))
        if report.faulted:
            print(f"\nfaulted runs ({len(report.faulted)}): " + ", ".join(report.faulted))
        if report.unclosed:
            print(f"unclosed runs ({len(report.unclosed)}): " + ", ".join(report.unclosed))
    elif args.metric == "summary":
        metrics = compute_command_metrics(records)
        print(render_distribution(tof_overall(records), bars=False))
        print(render_distribution(metrics.issuance_to_motion, bars=False))
        print(render_distribution(metrics.completion, bars=False))
        print(render_distribution(metrics.fault_lockout, bars=False))
        report = compute_op_runtime(records)
        for op_id in sorted(report.per_op):
            print(render_distribution(report.per_op[op_id], bars=False))
    else:
        print(f"unknown metric {args.metric}", file=sys.stderr)
        return 2
    if args.csv and csv_rows:
        with open(args.csv, "w", encoding="utf-8") as fh:
            for row in csv_rows:
                fh.write(",".join(str(c) for c in row) + "\n")
        print(f"csv written to {args.csv}")
    return 0


def cmd_inject(args: argparse.Namespace) -> int:
    if args.broker.startswith("loopback"):
        print("error: the loopback bus is in-process; use a scenario file or the "
              "Supervisor.inject API to drive a local run", file=sys.stderr)
        return 2
    arg_name = INJECT_VERBS.get(args.verb)
    if arg_name is None:
        print(f"unknown verb {args.verb}; one of {sorted(INJECT_VERBS)}", file=sys.stderr)
        return 2
    clock = WallClock()
    scheduler = Scheduler(clock)
    bus = make_bus(args.broker, scheduler, clock)
    bus.publish(Envelope.json(f"sys/ctl/{args.verb}", {arg_name: args.target},
                              qos=QOS_AT_LEAST_ONCE, source_ts=clock.now_ms()))
    bus.close()
    print(f"sent {args.verb} {args.target} via {args.broker}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plantline",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a plant configuration")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="boot the plant and execute a scenario")
    p.add_argument("config")
    p.add_argument("--scenario", help="scenario YAML file")
    p.add_argument("--until", type=float, help="horizon in simulated seconds")
    p.add_argument("--log", help="override the event log path")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="timing reports from an event log")
    p.add_argument("log")
    p.add_argument("metric", choices=["tof", "motion", "completion",
                                      "fault-lockout", "op-runtime", "summary"])
    p.add_argument("--csv", help="also write a csv summary")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inject", help="send a control verb to a running instance")
    p.add_argument("verb")
    p.add_argument("target")
    p.add_argument("--broker", default="loopback:", help="broker url of the instance")
    p.set_defaults(func=cmd_inject)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
