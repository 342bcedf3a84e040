"""Command line entry points.

    stormsim run <scenario> [--seed N] [--out DIR] [--check]
                 [--disable-control] [--serve] [--listen HOST:PORT]
                 [--compress K] [--wire-log PATH]
    stormsim validate <scenario>
    stormsim report <bundle-dir>

``<scenario>`` is a YAML path or the name of a bundled scenario. Exit codes:
0 on success, 2 for configuration problems, 3 when --check finds a failed
scenario check.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

from .report import (
    compute_metrics,
    evaluate_checks,
    format_summary,
    read_bundle,
    write_bundle,
)
from .scenario import ScenarioConfig, ScenarioError, load_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECK_FAILED = 3

BUNDLED_DIR = Path(__file__).parent / "scenarios"


def list_bundled() -> list[str]:
    if not BUNDLED_DIR.is_dir():
        return []
    return sorted(p.stem for p in BUNDLED_DIR.glob("*.yaml"))


def resolve_scenario(name_or_path: str) -> Path:
    direct = Path(name_or_path)
    if direct.exists():
        return direct
    bundled = BUNDLED_DIR / f"{name_or_path}.yaml"
    if bundled.exists():
        return bundled
    known = ", ".join(list_bundled()) or "none bundled"
    raise ScenarioError(
        f"no scenario file {name_or_path!r} (bundled: {known})")


def _parse_listen(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ScenarioError(f"--listen wants HOST:PORT, got {text!r}")
    return host, int(port)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stormsim",
        description="stormwater network simulator and control platform")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario to a report bundle")
    run_p.add_argument("scenario", help="YAML path or bundled scenario name")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    run_p.add_argument("--out", default=None,
                       help="bundle directory (default runs/<name>-seed<N>)")
    run_p.add_argument("--check", action="store_true",
                       help="evaluate the scenario's checks; exit 3 on fail")
    run_p.add_argument("--disable-control", action="store_true",
                       help="pin valves open and drop control subscriptions")
    run_p.add_argument("--serve", action="store_true",
                       help="pace the run against the wall clock and expose "
                            "the HTTP API while it runs")
    run_p.add_argument("--listen", default="127.0.0.1:8008",
                       help="HOST:PORT for --serve (default %(default)s)")
    run_p.add_argument("--compress", type=float, default=60.0,
                       help="virtual seconds per wall second in --serve "
                            "(default %(default)s)")
    run_p.add_argument("--wire-log", default=None,
                       help="append accepted telemetry to this wire-format "
                            "log file")

    val_p = sub.add_parser("validate", help="load and cross-check a scenario")
    val_p.add_argument("scenario")

    rep_p = sub.add_parser("report", help="summarize an existing bundle")
    rep_p.add_argument("bundle")

    sub.add_parser("scenarios", help="list bundled scenarios")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    from .runner import Simulation

    scenario = load_scenario(resolve_scenario(args.scenario))
    control = False if args.disable_control else None
    sim = Simulation(scenario, seed=args.seed, control=control,
                     log_path=args.wire_log)

    pacer = None
    api = None
    if args.serve:
        from .engine import wall_clock_pacer
        from .server import ApiServer

        host, port = _parse_listen(args.listen)
        api = ApiServer(
            sim.store, sim.registry, scenario.node_specs,
            clock=lambda: sim.loop.now, listen=(host, port),
            intervals_view=lambda: {
                nid: rt.config.sampling_interval_min
                for nid, rt in sim.nodes.items()})
        api.start()
        bound = api.address
        print(f"serving http://{bound[0]}:{bound[1]}/api/v1 "
              f"at {args.compress:g}x speed", flush=True)
        pacer = wall_clock_pacer(args.compress)

    try:
        result = sim.run(pacer=pacer)
    finally:
        if api is not None:
            api.stop()

    metrics = compute_metrics(result)
    out_dir = args.out
    if out_dir is None:
        suffix = "" if result.control else "-uncontrolled"
        out_dir = f"runs/{scenario.name}-seed{result.seed}{suffix}"
    bundle_path = write_bundle(result, out_dir, metrics=metrics)
    print(format_summary({"manifest": read_bundle(bundle_path)["manifest"],
                          "metrics": metrics}))
    print(f"bundle        {bundle_path}")

    if args.check:
        failures = 0
        for check in evaluate_checks(metrics, scenario.checks):
            verdict = "pass" if check["passed"] else "FAIL"
            actual = check["actual"]
            shown = f"{actual:.6g}" if isinstance(actual, float) else actual
            print(f"check {verdict}    {check['metric']} {check['op']} "
                  f"{check['value']} (actual {shown})")
            failures += 0 if check["passed"] else 1
        if failures:
            print(f"{failures} check(s) failed", file=sys.stderr)
            return EXIT_CHECK_FAILED
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    scenario = load_scenario(resolve_scenario(args.scenario))
    graph = scenario.build_graph()
    scenario.build_link()
    scenario.build_subscriptions()
    print(f"{scenario.name}: ok "
          f"({len(graph.catchments)} catchments, "
          f"{len(graph.storages)} storages, {len(graph.reaches)} reaches, "
          f"{len(scenario.node_specs)} nodes, "
          f"{len(scenario.raw.get('subscriptions', []))} subscriptions)")
    print(f"config hash {scenario.config_hash()}")
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    try:
        bundle = read_bundle(args.bundle)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    print(format_summary(bundle))
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "scenarios":
            for name in list_bundled():
                print(name)
            return EXIT_OK
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG  # unreachable with required subparsers


if __name__ == "__main__":
    sys.exit(main())
