"""Run report: canonical, diff-friendly summary of one scenario run.

Flows are ordered by (subscriber, first_seen, 5-tuple) and JSON is emitted
with sorted keys, so equal runs serialize to byte-equal documents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .router_dpi import Router

if TYPE_CHECKING:  # pragma: no cover - import cycle guard for annotations only
    from .driver import Scenario


@dataclass
class RunReport:
    data: dict

    def to_json(self) -> str:
        return canonical_json(self.data)

    @property
    def anomalies(self) -> list[dict]:
        return self.data["anomalies"]

    @property
    def flows(self) -> list[dict]:
        return self.data["flows"]

    @property
    def totals(self) -> dict:
        return self.data["totals"]


def canonical_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def _flow_row(flow) -> dict:
    return {
        "subscriber": str(flow.subscriber),
        "src_ip": str(flow.key.src_ip),
        "src_port": flow.key.src_port,
        "dst_ip": str(flow.key.dst_ip),
        "dst_port": flow.key.dst_port,
        "proto": flow.key.proto_name,
        "app": flow.label,
        "verdict": flow.verdict.action,
        "dscp": flow.dscp,
        "pkts_up": flow.pkts_up,
        "pkts_down": flow.pkts_down,
        "bytes_up": flow.bytes_up,
        "bytes_down": flow.bytes_down,
        "forwarded_bytes": flow.forwarded_bytes,
        "first_seen_ms": flow.first_seen,
        "last_seen_ms": flow.last_seen,
        "classified_at_packet": flow.classified_at_packet,
    }


def build_report(scenario: "Scenario", router: Router, devices: list,
                 run_log: list[str],
                 connected_ms: dict | None = None) -> RunReport:
    flows = sorted(router.flows.values(),
                   key=lambda f: (int(f.subscriber), f.first_seen,
                                  int(f.key.src_ip), f.key.src_port,
                                  int(f.key.dst_ip), f.key.dst_port, f.key.proto))
    flow_rows = [_flow_row(f) for f in flows]

    subscribers = []
    anomalies = []
    for ip in sorted(router.subscribers, key=int):
        stats = router.subscribers[ip]
        subscribers.append({
            "ip": str(ip),
            "apps": {app: {"bytes": c.bytes, "packets": c.packets, "flows": c.flows}
                     for app, c in sorted(stats.per_app.items())},
            "flags": sorted(stats.flags),
            "prioritized_pkts": stats.prioritized_pkts,
        })
        for flag in sorted(stats.flags):
            anomalies.append({"ip": str(ip), "flag": flag})

    verdict_totals: dict[str, int] = {}
    app_totals: dict[str, int] = {}
    totals = {
        "flows": len(flow_rows),
        "packets": sum(r["pkts_up"] + r["pkts_down"] for r in flow_rows),
        "bytes": sum(r["bytes_up"] + r["bytes_down"] for r in flow_rows),
        "forwarded_bytes": sum(r["forwarded_bytes"] for r in flow_rows),
        "ttl_expired": router.ttl_expired,
    }
    for row in flow_rows:
        verdict_totals[row["verdict"]] = verdict_totals.get(row["verdict"], 0) + 1
        app_totals[row["app"]] = app_totals.get(row["app"], 0) + 1
    totals["verdicts"] = verdict_totals
    totals["apps"] = app_totals

    connected_ms = connected_ms or {}
    launches = {}
    device_rows = []
    for dev in devices:
        row = {"index": dev.index, "mac": str(dev.mac),
               "ip": str(dev.ip) if dev.ip is not None else None,
               "online_ms": dev.online_at,
               "connected_ms": connected_ms.get(dev.ip)}
        device_rows.append(row)
        if dev.ip is not None and dev.launch_log:
            launches[str(dev.ip)] = [[t, pkg] for t, pkg, _ in dev.launch_log]

    data = {
        "scenario": {
            "device_count": scenario.device_count,
            "apps": list(scenario.apps),
            "duration_ms": scenario.duration_ms,
            "seed": scenario.seed,
            "intent_delay_ms": scenario.intent_delay_ms,
            "poll_interval_ms": scenario.poll_interval_ms,
            "pool": {
                "first": str(scenario.pool.first),
                "last": str(scenario.pool.last),
                "mask": str(scenario.pool.subnet_mask),
                "router": str(scenario.pool.router),
                "lease_seconds": scenario.pool.lease_seconds,
            },
            "thresholds": {
                "window_ms": scenario.thresholds.window_ms,
                "heavy_bytes": scenario.thresholds.heavy_bytes,
                "flow_limit": scenario.thresholds.flow_limit,
            },
        },
        "devices": device_rows,
        "flows": flow_rows,
        "subscribers": subscribers,
        "anomalies": anomalies,
        "launches": launches,
        "log": list(run_log),
        "totals": totals,
    }
    return RunReport(data)
