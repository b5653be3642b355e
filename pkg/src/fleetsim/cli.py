"""Command-line entry point.

Usage:
    fleet run <scenario.json> [--seed N] [--devices N] [--format table|json|csv]
              [--out PATH] [--fail-on-anomaly]
    fleet report <report.json> [--format table|json|csv]
    fleet validate <scenario.json>

Exit codes: 0 success, 1 anomalies present with --fail-on-anomaly,
2 configuration or input error. FLEET_LOG={quiet,info,trace} controls logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from ipaddress import IPv4Address
from pathlib import Path
from typing import Optional

from .dhcpd import AddressPool
from .driver import ConfigError, Scenario, default_pool, run_scenario
from .report import canonical_json
from .router_dpi import AnomalyThresholds

log = logging.getLogger(__name__)

_SCENARIO_KEYS = {"device_count", "apps", "duration_ms", "seed",
                  "intent_delay_ms", "poll_interval_ms", "pool", "signatures",
                  "policies", "thresholds", "manifest_dir"}
_POOL_KEYS = {"first", "last", "mask", "router", "lease_seconds"}
_THRESHOLD_KEYS = {"window_ms", "heavy_bytes", "flow_limit"}


def _require(raw: dict, key: str, kind: type, path: str = ""):
    where = f"{path}.{key}" if path else key
    if key not in raw:
        raise ConfigError(where, "missing required field")
    value = raw[key]
    if kind is int and (not isinstance(value, int) or isinstance(value, bool)):
        raise ConfigError(where, f"expected integer, got {value!r}")
    if kind is str and not isinstance(value, str):
        raise ConfigError(where, f"expected string, got {value!r}")
    if kind is list and not isinstance(value, list):
        raise ConfigError(where, f"expected list, got {value!r}")
    if kind is dict and not isinstance(value, dict):
        raise ConfigError(where, f"expected object, got {value!r}")
    return value


def _optional(raw: dict, key: str, kind: type, fallback, path: str = ""):
    if key not in raw:
        return fallback
    return _require(raw, key, kind, path)


def _ip(text, where: str) -> IPv4Address:
    try:
        return IPv4Address(text)
    except ValueError as exc:
        raise ConfigError(where, f"bad address {text!r}") from exc


def parse_scenario(path: str | Path) -> Scenario:
    """Load and strictly validate a scenario file; raises ConfigError."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read scenario: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(str(path), "scenario must be a JSON object")
    for key in raw:
        if key not in _SCENARIO_KEYS:
            raise ConfigError(key, "unknown key")

    pool_raw = _optional(raw, "pool", dict, None)
    if pool_raw is None:
        pool = default_pool()
    else:
        for key in pool_raw:
            if key not in _POOL_KEYS:
                raise ConfigError(f"pool.{key}", "unknown key")
        base = default_pool()
        try:
            pool = AddressPool(
                _ip(_optional(pool_raw, "first", str, str(base.first), "pool"), "pool.first"),
                _ip(_optional(pool_raw, "last", str, str(base.last), "pool"), "pool.last"),
                _ip(_optional(pool_raw, "mask", str, str(base.subnet_mask), "pool"), "pool.mask"),
                _ip(_optional(pool_raw, "router", str, str(base.router), "pool"), "pool.router"),
                _optional(pool_raw, "lease_seconds", int, base.lease_seconds, "pool"),
            )
        except ValueError as exc:
            raise ConfigError("pool", str(exc)) from exc

    thr_raw = _optional(raw, "thresholds", dict, None)
    if thr_raw is None:
        thresholds = AnomalyThresholds()
    else:
        for key in thr_raw:
            if key not in _THRESHOLD_KEYS:
                raise ConfigError(f"thresholds.{key}", "unknown key")
        thresholds = AnomalyThresholds(
            _optional(thr_raw, "window_ms", int, 60_000, "thresholds"),
            _optional(thr_raw, "heavy_bytes", int, 10_000_000, "thresholds"),
            _optional(thr_raw, "flow_limit", int, 100, "thresholds"),
        )

    apps = _require(raw, "apps", list)
    if not all(isinstance(a, str) for a in apps):
        raise ConfigError("apps", "every entry must be a string")

    scenario = Scenario(
        device_count=_require(raw, "device_count", int),
        apps=tuple(apps),
        duration_ms=_require(raw, "duration_ms", int),
        seed=_optional(raw, "seed", int, 0),
        intent_delay_ms=_optional(raw, "intent_delay_ms", int, 5000),
        poll_interval_ms=_optional(raw, "poll_interval_ms", int, 1000),
        pool=pool,
        signatures_path=_optional(raw, "signatures", str, None),
        policies_path=_optional(raw, "policies", str, None),
        thresholds=thresholds,
        manifest_dir=_optional(raw, "manifest_dir", str, None),
    )
    scenario.validate()
    return scenario


CSV_HEADER = "subscriber,app,proto,bytes_up,bytes_down,forwarded,verdict"


def render_csv(data: dict) -> str:
    lines = [CSV_HEADER]
    for row in data["flows"]:
        lines.append(f"{row['subscriber']},{row['app']},{row['proto']},"
                     f"{row['bytes_up']},{row['bytes_down']},"
                     f"{row['forwarded_bytes']},{row['verdict']}")
    return "\n".join(lines) + "\n"


def render_table(data: dict) -> str:
    out = []
    totals = data["totals"]
    scenario = data.get("scenario", {})
    out.append(f"devices={scenario.get('device_count', '?')} "
               f"seed={scenario.get('seed', '?')} "
               f"duration_ms={scenario.get('duration_ms', '?')}")
    out.append(f"flows={totals['flows']} packets={totals['packets']} "
               f"bytes={totals['bytes']} forwarded={totals['forwarded_bytes']}")
    header = f"{'subscriber':<16}{'app':<14}{'proto':<6}{'bytes_up':>12}{'bytes_down':>12}{'forwarded':>12}  verdict"
    for sub in data["subscribers"]:
        flags = f"  [{' '.join(sub['flags'])}]" if sub["flags"] else ""
        out.append("")
        out.append(f"subscriber {sub['ip']}{flags}")
        out.append(header)
        for row in data["flows"]:
            if row["subscriber"] != sub["ip"]:
                continue
            out.append(f"{row['subscriber']:<16}{row['app']:<14}{row['proto']:<6}"
                       f"{row['bytes_up']:>12}{row['bytes_down']:>12}"
                       f"{row['forwarded_bytes']:>12}  {row['verdict']}")
    if data["anomalies"]:
        out.append("")
        out.append("anomalies:")
        for item in data["anomalies"]:
            out.append(f"  {item['ip']}  {item['flag']}")
    return "\n".join(out) + "\n"


def _render(data: dict, fmt: str) -> str:
    if fmt == "json":
        return canonical_json(data)
    if fmt == "csv":
        return render_csv(data)
    return render_table(data)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fleet",
                                     description="virtual phone-fleet simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario and emit its report")
    run_p.add_argument("scenario")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--devices", type=int, default=None)
    run_p.add_argument("--format", choices=("table", "json", "csv"), default="json")
    run_p.add_argument("--out", default=None)
    run_p.add_argument("--fail-on-anomaly", action="store_true")
    run_p.add_argument("--frame-log", default=None,
                       help="write a tab-separated frame log for debugging")

    rep_p = sub.add_parser("report", help="re-render a saved JSON report")
    rep_p.add_argument("path")
    rep_p.add_argument("--format", choices=("table", "json", "csv"), default="table")

    val_p = sub.add_parser("validate", help="check a scenario file")
    val_p.add_argument("scenario")
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = parse_scenario(args.scenario)
        if args.seed is not None:
            scenario.seed = args.seed
        if args.devices is not None:
            scenario.device_count = args.devices
        scenario.validate()
        report = run_scenario(scenario, frame_log_path=args.frame_log)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    text = _render(report.data, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.fail_on_anomaly and report.anomalies:
        print(f"anomalies detected: {len(report.anomalies)}", file=sys.stderr)
        return 1
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    try:
        data = json.loads(Path(args.path).read_text())
        _ = data["flows"], data["totals"], data["subscribers"], data["anomalies"]
    except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
        print(f"cannot read report: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(_render(data, args.format))
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        scenario = parse_scenario(args.scenario)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"ok: {scenario.device_count} devices, {len(scenario.apps)} apps, "
          f"{scenario.duration_ms} ms")
    return 0


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO,
             "trace": logging.DEBUG}.get(os.environ.get("FLEET_LOG", "quiet"),
                                         logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[list[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "report":
        return cmd_report(args)
    return cmd_validate(args)


if __name__ == "__main__":
    raise SystemExit(main())
