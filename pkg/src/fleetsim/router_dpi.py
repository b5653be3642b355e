"""Gateway router with embedded DPI: flow tracking, signature classification,
policy enforcement, and per-subscriber statistics with anomaly flags.

Rules match in file order, first match wins. Pending flows forward under the
``*`` default policy; the verdict is re-evaluated exactly once when the flow
classifies (or exhausts its inspection budget and becomes Unknown).
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from ipaddress import IPv4Address
from typing import Callable, Optional, Union

from .netfabric import PROTO_TCP, PROTO_UDP, Ipv4Packet, SimClock

log = logging.getLogger(__name__)

MAX_INSPECT = 8
INSPECT_BYTES = 256

LAN = "lan"
CLOUD = "cloud"

PENDING = "pending"
CLASSIFIED = "classified"
UNKNOWN = "unknown"

ALLOW = "allow"
BLOCK = "block"
THROTTLE = "throttle"
PRIORITIZE = "prioritize"

DSCP_EF = 46  # expedited-forwarding mark recorded for prioritized flows

HEAVY_USER = "heavy_user"
SIGNALING_OVERLOAD = "signaling_overload"

_PROTO_NAMES = {PROTO_TCP: "tcp", PROTO_UDP: "udp"}


class RuleSyntaxError(Exception):
    def __init__(self, line: int, reason: str) -> None:
        super().__init__(f"line {line}: {reason}")
        self.line = line


class PolicyError(Exception):
    pass


@dataclass(frozen=True)
class FlowKey:
    """Canonical 5-tuple; the first-seen packet defines the initiator."""

    src_ip: IPv4Address
    src_port: int
    dst_ip: IPv4Address
    dst_port: int
    proto: int

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst_ip, self.dst_port, self.src_ip, self.src_port, self.proto)

    @property
    def proto_name(self) -> str:
        return _PROTO_NAMES.get(self.proto, str(self.proto))


@dataclass(frozen=True)
class PrefixMatch:
    offset: int
    data: bytes


@dataclass(frozen=True)
class HostMatch:
    literal: bytes


@dataclass(frozen=True)
class SignatureRule:
    app: str
    proto: int
    match: Union[PrefixMatch, HostMatch]
    port: Optional[int] = None
    min_len: Optional[int] = None


def _parse_rule_line(line: str, lineno: int) -> SignatureRule:
    fields: dict[str, str] = {}
    for token in line.split():
        key, eq, value = token.partition("=")
        if not eq or key in fields:
            raise RuleSyntaxError(lineno, f"bad token {token!r}")
        fields[key] = value
    for required in ("app", "proto", "match"):
        if required not in fields:
            raise RuleSyntaxError(lineno, f"missing {required}=")
    proto = {"tcp": PROTO_TCP, "udp": PROTO_UDP}.get(fields["proto"])
    if proto is None:
        raise RuleSyntaxError(lineno, f"bad proto {fields['proto']!r}")
    match_text = fields["match"]
    match: Union[PrefixMatch, HostMatch]
    if match_text.startswith("prefix@"):
        spec, colon, hexdata = match_text[len("prefix@"):].partition(":")
        try:
            offset = int(spec)
            data = bytes.fromhex(hexdata)
        except ValueError:
            raise RuleSyntaxError(lineno, f"bad prefix match {match_text!r}") from None
        if not colon or not data or offset < 0 or offset + len(data) > INSPECT_BYTES:
            raise RuleSyntaxError(lineno, f"bad prefix match {match_text!r}")
        match = PrefixMatch(offset, data)
    elif match_text.startswith("host~"):
        literal = match_text[len("host~"):]
        if not literal:
            raise RuleSyntaxError(lineno, "empty host literal")
        if proto != PROTO_TCP:
            raise RuleSyntaxError(lineno, "host match is only valid for tcp")
        match = HostMatch(literal.encode())
    else:
        raise RuleSyntaxError(lineno, f"bad match {match_text!r}")
    port = min_len = None
    for extra in set(fields) - {"app", "proto", "match", "port", "min_len"}:
        raise RuleSyntaxError(lineno, f"unknown field {extra!r}")
    try:
        if "port" in fields:
            port = int(fields["port"])
        if "min_len" in fields:
            min_len = int(fields["min_len"])
    except ValueError:
        raise RuleSyntaxError(lineno, "port and min_len must be integers") from None
    return SignatureRule(fields["app"], proto, match, port, min_len)


def parse_rules(text: str) -> list[SignatureRule]:
    """Parse a signature file: one rule per line, # comments, file order kept."""
    rules = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rules.append(_parse_rule_line(line, lineno))
    return rules


@dataclass(frozen=True)
class Policy:
    app: str
    action: str
    rate_bytes_s: int = 0
    burst_bytes: int = 0


class PolicyTable:
    """App-name to policy map; the ``*`` default must be present exactly once."""

    def __init__(self, policies: list[Policy]) -> None:
        self._by_app: dict[str, Policy] = {}
        for policy in policies:
            if policy.app in self._by_app:
                raise PolicyError(f"duplicate policy for {policy.app!r}")
            self._by_app[policy.app] = policy
        if "*" not in self._by_app:
            raise PolicyError("missing '*' default policy")

    @property
    def default(self) -> Policy:
        return self._by_app["*"]

    def for_app(self, app: Optional[str]) -> Policy:
        if app is None:
            return self.default
        return self._by_app.get(app, self.default)


def parse_policies(text: str) -> PolicyTable:
    policies = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = dict(token.partition("=")[::2] for token in line.split())
        if set(fields) != {"app", "action"}:
            raise PolicyError(f"line {lineno}: expected app= and action=")
        action = fields["action"]
        if action in (ALLOW, BLOCK, PRIORITIZE):
            policies.append(Policy(fields["app"], action))
        elif action.startswith(THROTTLE + ":"):
            parts = action.split(":")
            try:
                rate, burst = int(parts[1]), int(parts[2])
            except (IndexError, ValueError):
                raise PolicyError(f"line {lineno}: bad throttle spec {action!r}") from None
            if len(parts) != 3 or rate <= 0 or burst <= 0:
                raise PolicyError(f"line {lineno}: bad throttle spec {action!r}")
            policies.append(Policy(fields["app"], THROTTLE, rate, burst))
        else:
            raise PolicyError(f"line {lineno}: unknown action {action!r}")
    return PolicyTable(policies)


@dataclass
class AnomalyThresholds:
    window_ms: int = 60_000
    heavy_bytes: int = 10_000_000
    flow_limit: int = 100


class _WindowCounter:
    """Per-second buckets summed over a trailing window."""

    def __init__(self, window_ms: int) -> None:
        self._window_s = max(1, window_ms // 1000)
        self._buckets: deque[list[int]] = deque()
        self._total = 0

    def add(self, now_ms: int, value: int) -> None:
        sec = now_ms // 1000
        if self._buckets and self._buckets[-1][0] == sec:
            self._buckets[-1][1] += value
        else:
            self._buckets.append([sec, value])
        self._total += value
        self._prune(sec)

    def total(self, now_ms: int) -> int:
        self._prune(now_ms // 1000)
        return self._total

    def _prune(self, sec: int) -> None:
        floor = sec - self._window_s + 1
        while self._buckets and self._buckets[0][0] < floor:
            self._total -= self._buckets.popleft()[1]


@dataclass
class AppCounters:
    bytes: int = 0
    packets: int = 0
    flows: int = 0


class SubscriberStats:
    def __init__(self, ip: IPv4Address, window_ms: int) -> None:
        self.ip = ip
        self.per_app: dict[str, AppCounters] = {}
        self.window_bytes = _WindowCounter(window_ms)
        self.window_flows = _WindowCounter(window_ms)
        self.flags: set[str] = set()
        self.prioritized_pkts = 0

    def counters(self, app: str) -> AppCounters:
        if app not in self.per_app:
            self.per_app[app] = AppCounters()
        return self.per_app[app]


@dataclass
class Flow:
    key: FlowKey
    subscriber: IPv4Address
    first_seen: int
    last_seen: int
    class_state: str = PENDING
    app: Optional[str] = None
    inspected: int = 0
    classified_at_packet: Optional[int] = None
    verdict: Policy = Policy("*", ALLOW)
    pkts_up: int = 0
    pkts_down: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    forwarded_up: int = 0
    forwarded_down: int = 0
    dscp: int = 0
    tokens: float = 0.0
    last_refill_ms: int = 0
    queue: deque = field(default_factory=deque)
    drain_scheduled: bool = False

    @property
    def label(self) -> str:
        if self.class_state == CLASSIFIED:
            return self.app or UNKNOWN
        return self.class_state  # "pending" or "unknown"

    @property
    def forwarded_bytes(self) -> int:
        return self.forwarded_up + self.forwarded_down


class Outcome(Enum):
    FORWARDED = "forwarded"
    DROPPED_TTL = "dropped_ttl"
    DROPPED_POLICY = "dropped_policy"
    DELAYED = "delayed"


@dataclass(frozen=True)
class RouteResult:
    outcome: Outcome
    until_ms: Optional[int] = None


class Router:
    """Default gateway between the LAN bridge and the cloud."""

    def __init__(self, rules: list[SignatureRule], policies: PolicyTable,
                 clock: SimClock,
                 lan_tx: Optional[Callable[[Ipv4Packet], None]] = None,
                 cloud_tx: Optional[Callable[[Ipv4Packet], None]] = None,
                 thresholds: Optional[AnomalyThresholds] = None,
                 max_inspect: int = MAX_INSPECT) -> None:
        self.rules = rules
        self.policies = policies
        self.clock = clock
        self.lan_tx = lan_tx
        self.cloud_tx = cloud_tx
        self.thresholds = thresholds or AnomalyThresholds()
        self.max_inspect = max_inspect
        self.flows: dict[FlowKey, Flow] = {}
        self.subscribers: dict[IPv4Address, SubscriberStats] = {}
        self.ttl_expired = 0

    # -- flow table -----------------------------------------------------------

    def _lookup(self, packet: Ipv4Packet, ingress: str, now: int) -> Flow:
        seg = packet.segment
        key = FlowKey(packet.src, seg.src_port, packet.dst, seg.dst_port, packet.proto)
        flow = self.flows.get(key)
        if flow is None:
            flow = self.flows.get(key.reversed())
        if flow is None:
            subscriber = packet.src if ingress == LAN else packet.dst
            flow = Flow(key, subscriber, now, now,
                        verdict=self.policies.default)
            if flow.verdict.action == THROTTLE:
                self._bucket_init(flow, now)
            self.flows[key] = flow
            stats = self._stats(subscriber)
            stats.counters(flow.label).flows += 1
            stats.window_flows.add(now, 1)
        return flow

    def _stats(self, subscriber: IPv4Address) -> SubscriberStats:
        stats = self.subscribers.get(subscriber)
        if stats is None:
            stats = SubscriberStats(subscriber, self.thresholds.window_ms)
            self.subscribers[subscriber] = stats
        return stats

    # -- operations -------------------------------------------------------------

    def route(self, ingress: str, packet: Ipv4Packet) -> RouteResult:
        """Present one packet to the gateway; forwards, drops, or delays it."""
        now = self.clock.now
        if packet.ttl <= 1:
            self.ttl_expired += 1
            return RouteResult(Outcome.DROPPED_TTL)
        forwarded = replace(packet, ttl=packet.ttl - 1)
        flow = self._lookup(packet, ingress, now)
        up = ingress == LAN
        size = packet.total_length
        if up:
            flow.pkts_up += 1
            flow.bytes_up += size
        else:
            flow.pkts_down += 1
            flow.bytes_down += size
        flow.last_seen = now
        stats = self._stats(flow.subscriber)
        stats.counters(flow.label).packets += 1
        stats.counters(flow.label).bytes += size
        stats.window_bytes.add(now, size)
        if flow.class_state == PENDING:
            self.classify(flow, packet)
        return self._enforce(flow, forwarded, up, now)

    def classify(self, flow: Flow, packet: Ipv4Packet) -> str:
        """One inspection step; returns the (possibly new) class state."""
        if flow.class_state != PENDING:
            return flow.class_state
        flow.inspected += 1
        payload = packet.payload
        view = payload[:INSPECT_BYTES]
        for rule in self.rules:
            if rule.proto != flow.key.proto:
                continue
            if rule.port is not None and rule.port != flow.key.dst_port:
                continue
            if rule.min_len is not None and len(payload) < rule.min_len:
                continue
            if self._match(rule, view):
                self._transition(flow, CLASSIFIED, rule.app)
                return flow.class_state
        if flow.inspected >= self.max_inspect:
            self._transition(flow, UNKNOWN, None)
        return flow.class_state

    @staticmethod
    def _match(rule: SignatureRule, payload: bytes) -> bool:
        if isinstance(rule.match, PrefixMatch):
            end = rule.match.offset + len(rule.match.data)
            return payload[rule.match.offset:end] == rule.match.data
        idx = payload.find(b"Host: ")
        if idx < 0:
            return False
        start = idx + len(b"Host: ")
        end = len(payload)
        for stop in (b"\r", b"\n"):
            pos = payload.find(stop, start)
            if pos >= 0:
                end = min(end, pos)
        return rule.match.literal in payload[start:end]

    def _transition(self, flow: Flow, state: str, app: Optional[str]) -> None:
        old_label = flow.label
        old_verdict = flow.verdict
        flow.class_state = state
        flow.app = app
        flow.classified_at_packet = flow.inspected
        flow.verdict = self.policies.for_app(app)
        if flow.verdict is not old_verdict:
            # Verdict changed: settle any packets queued under the old verdict,
            # then start the new regime from a clean state.
            if flow.verdict.action == BLOCK:
                flow.queue.clear()
            elif flow.verdict.action in (ALLOW, PRIORITIZE):
                while flow.queue:
                    packet, up = flow.queue.popleft()
                    self._deliver(flow, packet, up)
            if flow.verdict.action == THROTTLE:
                self._bucket_init(flow, self.clock.now)
        stats = self._stats(flow.subscriber)
        old = stats.counters(old_label)
        new = stats.counters(flow.label)
        new.bytes += old.bytes
        new.packets += old.packets
        new.flows += old.flows
        del stats.per_app[old_label]

    def _enforce(self, flow: Flow, packet: Ipv4Packet, up: bool, now: int) -> RouteResult:
        action = flow.verdict.action
        if action in (ALLOW, PRIORITIZE):
            if action == PRIORITIZE:
                flow.dscp = DSCP_EF
                self._stats(flow.subscriber).prioritized_pkts += 1
            self._deliver(flow, packet, up)
            return RouteResult(Outcome.FORWARDED)
        if action == BLOCK:
            return RouteResult(Outcome.DROPPED_POLICY)
        # throttle: token bucket with FIFO delay per flow
        self._bucket_refill(flow, now)
        size = packet.total_length
        if not flow.queue and flow.tokens >= size:
            flow.tokens -= size
            self._deliver(flow, packet, up)
            return RouteResult(Outcome.FORWARDED)
        flow.queue.append((packet, up))
        until = self._schedule_drain(flow, now)
        return RouteResult(Outcome.DELAYED, until)

    # -- token bucket ----------------------------------------------------------

    def _bucket_init(self, flow: Flow, now: int) -> None:
        flow.tokens = float(flow.verdict.burst_bytes)
        flow.last_refill_ms = now

    def _bucket_refill(self, flow: Flow, now: int) -> None:
        elapsed = now - flow.last_refill_ms
        if elapsed > 0:
            flow.tokens = min(float(flow.verdict.burst_bytes),
                              flow.tokens + flow.verdict.rate_bytes_s * elapsed / 1000.0)
            flow.last_refill_ms = now

    def _schedule_drain(self, flow: Flow, now: int) -> Optional[int]:
        if flow.drain_scheduled or not flow.queue:
            return None
        head_size = flow.queue[0][0].total_length
        deficit = head_size - flow.tokens
        delay_ms = max(0, math.ceil(deficit * 1000.0 / flow.verdict.rate_bytes_s))
        at = now + delay_ms
        flow.drain_scheduled = True
        self.clock.schedule(at, lambda: self._drain(flow))
        return at

    def _drain(self, flow: Flow) -> None:
        flow.drain_scheduled = False
        now = self.clock.now
        self._bucket_refill(flow, now)
        while flow.queue:
            packet, up = flow.queue[0]
            if flow.tokens < packet.total_length:
                break
            flow.queue.popleft()
            flow.tokens -= packet.total_length
            self._deliver(flow, packet, up)
        if flow.queue:
            self._schedule_drain(flow, now)

    def _deliver(self, flow: Flow, packet: Ipv4Packet, up: bool) -> None:
        size = packet.total_length
        if up:
            flow.forwarded_up += size
            if self.cloud_tx is not None:
                self.cloud_tx(packet)
        else:
            flow.forwarded_down += size
            if self.lan_tx is not None:
                self.lan_tx(packet)

    # -- statistics --------------------------------------------------------------

    def scan_anomalies(self, now: Optional[int] = None) -> dict[IPv4Address, set[str]]:
        """Evaluate anomaly thresholds; flags are sticky for the run."""
        now = self.clock.now if now is None else now
        flagged: dict[IPv4Address, set[str]] = {}
        for ip, stats in self.subscribers.items():
            if stats.window_bytes.total(now) > self.thresholds.heavy_bytes:
                stats.flags.add(HEAVY_USER)
            if stats.window_flows.total(now) > self.thresholds.flow_limit:
                stats.flags.add(SIGNALING_OVERLOAD)
            if stats.flags:
                flagged[ip] = set(stats.flags)
        return flagged
