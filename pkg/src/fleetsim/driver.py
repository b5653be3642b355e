"""The test driver: discovers devices by polling the leases file, connects to
each over tcp/5555, installs the scenario's apps, and cycles launches with a
fixed delay between them. Also hosts the DHCP server endpoint and orchestrates
whole scenario runs.
"""

from __future__ import annotations

import importlib.resources
import logging
import shutil
import tempfile
from collections import Counter, deque
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from pathlib import Path
from typing import Callable, Optional

from .device import CONTROL_PORT, Device, AppManifest, manifest_from_json, manifest_to_json
from .dhcpd import (DHCP_CLIENT_PORT, DHCP_SERVER_PORT, AddressPool,
                    DhcpDecodeError, DhcpMessage, DhcpServer, LeaseFileCorrupt,
                    LEASE_ACTIVE, parse_leases)
from .netfabric import (BROADCAST_IP, BROADCAST_MAC, TCP_ACK, TCP_RST,
                        TCP_SYN, Bridge, Frame, Ipv4Packet, MacAddr,
                        MacDirectory, MalformedPacket, SimClock, TcpSegment,
                        UdpSegment, decode_packet, encode_packet, tcp_packet,
                        udp_packet)
from .report import RunReport, build_report
from .router_dpi import (LAN, CLOUD, AnomalyThresholds, PolicyError, Router,
                         RuleSyntaxError, parse_policies, parse_rules)

log = logging.getLogger(__name__)

BOOT_STAGGER_MS = 100
ANOMALY_SCAN_MS = 1000
DRIVER_MAC = MacAddr.parse("02:00:00:00:ff:01")
ROUTER_MAC = MacAddr.parse("02:00:00:00:ff:fe")


class ConfigError(Exception):
    """Scenario or rule/policy configuration is invalid; nothing was run."""

    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = path


def default_pool() -> AddressPool:
    return AddressPool(IPv4Address("10.0.2.100"), IPv4Address("10.0.2.199"),
                       IPv4Address("255.255.255.0"), IPv4Address("10.0.2.1"),
                       86_400)


@dataclass
class Scenario:
    """Declarative test plan for one run."""

    device_count: int
    apps: tuple[str, ...]
    duration_ms: int
    seed: int = 0
    intent_delay_ms: int = 5000
    poll_interval_ms: int = 1000
    pool: AddressPool = field(default_factory=default_pool)
    signatures_path: Optional[str] = None
    policies_path: Optional[str] = None
    thresholds: AnomalyThresholds = field(default_factory=AnomalyThresholds)
    manifest_dir: Optional[str] = None

    def validate(self) -> None:
        if self.device_count < 1:
            raise ConfigError("device_count", "must be at least 1")
        if self.duration_ms <= 0:
            raise ConfigError("duration_ms", "must be positive")
        if self.intent_delay_ms <= 0:
            raise ConfigError("intent_delay_ms", "must be positive")
        if self.poll_interval_ms <= 0:
            raise ConfigError("poll_interval_ms", "must be positive")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed", "must fit in 64 bits")
        if self.duration_ms < len(self.apps) * self.intent_delay_ms:
            raise ConfigError(
                "duration_ms",
                f"too short for one launch cycle "
                f"({len(self.apps)} apps x {self.intent_delay_ms} ms)")
        driver_ip = IPv4Address(int(self.pool.router) + 1)
        if driver_ip in self.pool:
            raise ConfigError("pool", "no address left for the driver host "
                                      "(router+1 falls inside the pool)")

    @property
    def driver_ip(self) -> IPv4Address:
        return IPv4Address(int(self.pool.router) + 1)


def load_manifest(ref: str, manifest_dir: Optional[str] = None) -> AppManifest:
    """Resolve an app reference: path to a JSON file, or a packaged corpus name."""
    candidates: list[Path] = []
    if "/" in ref or ref.endswith(".json"):
        candidates.append(Path(ref))
    elif manifest_dir is not None:
        candidates.append(Path(manifest_dir) / f"{ref}.json")
    if not candidates:
        resource = importlib.resources.files("fleetsim") / "data" / "manifests" / f"{ref}.json"
        if not resource.is_file():
            raise ConfigError("apps", f"unknown app {ref!r}")
        return manifest_from_json(resource.read_text())
    for path in candidates:
        if path.is_file():
            try:
                return manifest_from_json(path.read_text())
            except ValueError as exc:
                raise ConfigError("apps", f"bad manifest {path}: {exc}") from exc
    raise ConfigError("apps", f"manifest not found for {ref!r}")


def _read_packaged(name: str) -> str:
    return (importlib.resources.files("fleetsim") / "data" / name).read_text()


class ControlSession:
    """Driver side of one adb-like connection."""

    CONNECTING = "connecting"
    CONNECTED = "connected"
    CLOSED = "closed"

    def __init__(self, ip: IPv4Address, src_port: int) -> None:
        self.ip = ip
        self.port = CONTROL_PORT
        self.src_port = src_port
        self.state = ControlSession.CONNECTING
        self.peer_mac: Optional[MacAddr] = None
        self.out_seq = 0
        self.rx = bytearray()
        self.body: list[str] = []
        self.queue: deque[tuple[bytes, Callable[[str, list[str]], None]]] = deque()
        self.busy = False
        self.connected_at: Optional[int] = None
        self.app_cursor = 0
        self.prev_package: Optional[str] = None


class Driver:
    """Fabric endpoint running the DHCP server and the device automation."""

    def __init__(self, clock: SimClock, directory: MacDirectory,
                 dhcp: DhcpServer, leases_path: str | Path,
                 apps: list[AppManifest],
                 intent_delay_ms: int = 5000, poll_interval_ms: int = 1000,
                 duration_ms: Optional[int] = None,
                 run_log: Optional[list[str]] = None) -> None:
        self.clock = clock
        self.directory = directory
        self.dhcp = dhcp
        self.leases_path = Path(leases_path)
        self.apps = apps
        self.intent_delay_ms = intent_delay_ms
        self.poll_interval_ms = poll_interval_ms
        self.duration_ms = duration_ms
        self.run_log = run_log if run_log is not None else []

        self.ip = dhcp.server_id
        self.mac = DRIVER_MAC
        self.known_ips: set[IPv4Address] = set()
        self.sessions: dict[IPv4Address, ControlSession] = {}
        self._by_port: dict[int, ControlSession] = {}
        self._connect_order: list[IPv4Address] = []
        self._retry: list[IPv4Address] = []
        self._next_port = 50000
        self.poll_errors = 0

        self._send_frame: Optional[Callable[[Frame], None]] = None

    # -- wiring -------------------------------------------------------------

    def connect_fabric(self, bridge: Bridge) -> int:
        port = bridge.attach_port(self.mac, self._on_frame)
        self._send_frame = lambda frame: bridge.forward(port, frame)
        self.directory.publish(self.ip, self.mac)
        return port

    def start(self) -> None:
        """Begin the periodic leases poll at the current instant."""
        self.clock.schedule(self.clock.now, self._poll_tick)

    def _send(self, frame: Frame) -> None:
        assert self._send_frame is not None, "driver not attached"
        self._send_frame(frame)

    def _log(self, text: str) -> None:
        self.run_log.append(f"{self.clock.now} {text}")
        log.info("%s", text)

    # -- leases polling ------------------------------------------------------

    def poll_leases(self, path: str | Path | None = None,
                    now: Optional[int] = None) -> list[IPv4Address]:
        """Grep active-lease addresses from the file; returns ones not yet known."""
        path = self.leases_path if path is None else Path(path)
        try:
            leases = parse_leases(path)
        except (LeaseFileCorrupt, OSError) as exc:
            self.poll_errors += 1
            log.warning("skipping poll, leases file unreadable: %s", exc)
            return []
        fresh = []
        for lease in leases:
            if lease.state == LEASE_ACTIVE and lease.ip not in self.known_ips:
                self.known_ips.add(lease.ip)
                fresh.append(lease.ip)
        return fresh

    def _poll_tick(self) -> None:
        for ip in self.poll_leases():
            self.connect(ip)
        retry, self._retry = self._retry, []
        for ip in retry:
            self.connect(ip)
        next_at = self.clock.now + self.poll_interval_ms
        if self.duration_ms is None or next_at <= self.duration_ms:
            self.clock.schedule(next_at, self._poll_tick)

    # -- control sessions ------------------------------------------------------

    def connect(self, ip: IPv4Address) -> ControlSession:
        """Open (or return the existing) control session to ip:5555."""
        existing = self.sessions.get(ip)
        if existing is not None and existing.state != ControlSession.CLOSED:
            return existing
        self._next_port += 1
        session = ControlSession(ip, self._next_port)
        self.sessions[ip] = session
        self._by_port[session.src_port] = session
        mac = self.directory.lookup(ip)
        if mac is None:
            # No binding published yet; retry on the next poll.
            session.state = ControlSession.CLOSED
            self._retry.append(ip)
            return session
        session.peer_mac = mac
        pkt = tcp_packet(self.ip, session.src_port, ip, CONTROL_PORT, TCP_SYN)
        self._send(Frame(mac, self.mac, encode_packet(pkt)))
        self.clock.schedule(self.clock.now + self.poll_interval_ms,
                            lambda: self._connect_timeout(session))
        return session

    def _connect_timeout(self, session: ControlSession) -> None:
        if session.state != ControlSession.CONNECTING:
            return
        if self.sessions.get(session.ip) is session:
            del self.sessions[session.ip]
        self._by_port.pop(session.src_port, None)
        session.state = ControlSession.CLOSED
        self._retry.append(session.ip)
        log.warning("connection to %s:%d timed out", session.ip, CONTROL_PORT)

    def list_devices(self) -> list[str]:
        return [f"{ip}:{CONTROL_PORT}\tdevice" for ip in self._connect_order]

    def send_command(self, session: ControlSession, command: bytes,
                     on_done: Callable[[str, list[str]], None]) -> None:
        """Queue one command; commands are strictly serialized per session."""
        session.queue.append((command, on_done))
        if not session.busy:
            self._dispatch_next(session)

    def _dispatch_next(self, session: ControlSession) -> None:
        if not session.queue or session.state != ControlSession.CONNECTED:
            session.busy = False
            return
        session.busy = True
        command, _ = session.queue[0]
        # Flatten call stacks: transmit from a fresh event at the same instant.
        self.clock.schedule(self.clock.now, lambda: self._transmit(session, command))

    def _transmit(self, session: ControlSession, data: bytes) -> None:
        if session.state != ControlSession.CONNECTED:
            return
        assert session.peer_mac is not None
        for i in range(0, len(data), 1200):
            pkt = tcp_packet(self.ip, session.src_port, session.ip, CONTROL_PORT,
                             TCP_ACK, session.out_seq, data[i:i + 1200])
            session.out_seq += len(data[i:i + 1200])
            self._send(Frame(session.peer_mac, self.mac, encode_packet(pkt)))

    def _on_frame(self, frame: Frame) -> None:
        if frame.dst not in (self.mac, BROADCAST_MAC):
            return
        try:
            pkt = decode_packet(frame.payload)
        except MalformedPacket:
            return
        seg = pkt.segment
        if isinstance(seg, UdpSegment) and seg.dst_port == DHCP_SERVER_PORT:
            self._dhcp_rx(seg.payload)
            return
        if isinstance(seg, TcpSegment):
            session = self._by_port.get(seg.dst_port)
            if session is None or pkt.src != session.ip:
                return
            self._session_rx(session, frame.src, seg)

    def _dhcp_rx(self, payload: bytes) -> None:
        try:
            msg = DhcpMessage.decode(payload)
        except DhcpDecodeError:
            return
        reply = self.dhcp.handle_message(msg, self.clock.now)
        if reply is None:
            return
        dst_ip = reply.yiaddr if int(reply.yiaddr) != 0 else BROADCAST_IP
        pkt = udp_packet(self.ip, DHCP_SERVER_PORT, dst_ip, DHCP_CLIENT_PORT,
                         reply.encode())
        self._send(Frame(reply.chaddr, self.mac, encode_packet(pkt)))

    def _session_rx(self, session: ControlSession, src_mac: MacAddr,
                    seg: TcpSegment) -> None:
        if seg.flags & TCP_RST:
            log.info("connection to %s:%d refused", session.ip, CONTROL_PORT)
            session.state = ControlSession.CLOSED
            del self.sessions[session.ip]
            del self._by_port[session.src_port]
            self._retry.append(session.ip)
            return
        if seg.flags & TCP_SYN and seg.flags & TCP_ACK:
            if session.state != ControlSession.CONNECTING:
                return
            session.state = ControlSession.CONNECTED
            session.connected_at = self.clock.now
            self._connect_order.append(session.ip)
            self._log(f"connected to {session.ip}:{CONTROL_PORT}")
            ack = tcp_packet(self.ip, session.src_port, session.ip, CONTROL_PORT, TCP_ACK)
            self._send(Frame(src_mac, self.mac, encode_packet(ack)))
            self._start_program(session)
            return
        if seg.payload:
            session.rx.extend(seg.payload)
            self._consume_response(session)

    def _consume_response(self, session: ControlSession) -> None:
        while True:
            newline = session.rx.find(b"\n")
            if newline < 0:
                return
            line = session.rx[:newline].decode("utf-8", errors="replace")
            del session.rx[:newline + 1]
            if line == "Success" or line.startswith("Failure"):
                body, session.body = session.body, []
                if session.queue:
                    _, on_done = session.queue.popleft()
                    on_done(line, body)
                self._dispatch_next(session)
            else:
                session.body.append(line)

    # -- device program (install, then the launch cycle) -------------------------

    def _start_program(self, session: ControlSession) -> None:
        for manifest in self.apps:
            blob = manifest_to_json(manifest).encode()
            command = f"install {manifest.apk_name} {len(blob)}\n".encode() + blob
            self.send_command(session, command,
                              lambda status, _b, m=manifest, s=session:
                              self._install_done(s, m, status))
        if self.apps:
            self.clock.schedule(self.clock.now, lambda: self._app_step(session))

    def _install_done(self, session: ControlSession, manifest: AppManifest,
                      status: str) -> None:
        if status != "Success":
            self._log(f"{session.ip} install failed {manifest.apk_name}: {status}")

    def _app_step(self, session: ControlSession) -> None:
        """One launch slot: stop the previous app, start the next in order."""
        if session.state != ControlSession.CONNECTED or not self.apps:
            return
        if session.prev_package is not None:
            stop = f"shell am force-stop {session.prev_package}\n".encode()
            self.send_command(session, stop, lambda status, body: None)
        manifest = self.apps[session.app_cursor]
        session.app_cursor = (session.app_cursor + 1) % len(self.apps)
        session.prev_package = manifest.package
        start = f"shell am start -n {manifest.package}/{manifest.launch_activity}\n".encode()
        self.send_command(session, start,
                          lambda status, _b, m=manifest, s=session:
                          self._launch_done(s, m, status))
        next_at = self.clock.now + self.intent_delay_ms
        if self.duration_ms is None or next_at <= self.duration_ms:
            self.clock.schedule(next_at, lambda: self._app_step(session))

    def _launch_done(self, session: ControlSession, manifest: AppManifest,
                     status: str) -> None:
        if status == "Success":
            self._log(f"{session.ip} launched {manifest.package}")
        else:
            self._log(f"{session.ip} launch skipped {manifest.package}: {status}")


class CloudSink:
    """Terminates the cloud side of the topology and counts deliveries."""

    def __init__(self) -> None:
        self.delivered_pkts = 0
        self.delivered_bytes = 0
        self.by_service: Counter[tuple[IPv4Address, int]] = Counter()

    def deliver(self, pkt: Ipv4Packet) -> None:
        self.delivered_pkts += 1
        self.delivered_bytes += pkt.total_length
        self.by_service[(pkt.dst, pkt.segment.dst_port)] += pkt.total_length


def run_scenario(scenario: Scenario,
                 frame_log_path: str | Path | None = None) -> RunReport:
    """Build the full topology, run for scenario.duration_ms, return the report."""
    scenario.validate()
    if scenario.device_count > scenario.pool.size:
        log.warning("device_count %d exceeds pool size %d; extra devices will "
                    "fail to boot", scenario.device_count, scenario.pool.size)

    try:
        sig_text = (Path(scenario.signatures_path).read_text()
                    if scenario.signatures_path else _read_packaged("signatures.rules"))
        rules = parse_rules(sig_text)
    except (OSError, RuleSyntaxError) as exc:
        raise ConfigError("signatures", str(exc)) from exc
    try:
        pol_text = (Path(scenario.policies_path).read_text()
                    if scenario.policies_path else _read_packaged("policies.rules"))
        policies = parse_policies(pol_text)
    except (OSError, PolicyError) as exc:
        raise ConfigError("policies", str(exc)) from exc
    manifests = [load_manifest(ref, scenario.manifest_dir) for ref in scenario.apps]

    tmpdir = Path(tempfile.mkdtemp(prefix="fleetsim-"))
    frame_log_file = None
    run_log: list[str] = []
    try:
        clock = SimClock()
        if frame_log_path is not None:
            frame_log_file = open(frame_log_path, "w")
        bridge = Bridge(clock, frame_log_file.write if frame_log_file else None)
        directory = MacDirectory()
        directory.publish(scenario.pool.router, ROUTER_MAC)

        cloud = CloudSink()
        router = Router(rules, policies, clock, cloud_tx=cloud.deliver,
                        thresholds=scenario.thresholds)
        router_port = bridge.attach_port(ROUTER_MAC, lambda frame: _router_rx(frame))

        def lan_tx(pkt: Ipv4Packet) -> None:
            mac = directory.lookup(pkt.dst)
            if mac is None:
                log.debug("no MAC binding for %s, dropping", pkt.dst)
                return
            bridge.forward(router_port, Frame(mac, ROUTER_MAC, encode_packet(pkt)))

        router.lan_tx = lan_tx

        def _router_rx(frame: Frame) -> None:
            if frame.dst != ROUTER_MAC:
                return
            try:
                pkt = decode_packet(frame.payload)
            except MalformedPacket:
                return
            router.route(LAN, pkt)

        leases_path = tmpdir / "dhcpd.leases"
        dhcp = DhcpServer(scenario.pool, scenario.driver_ip, leases_path,
                          on_ack=directory.publish)
        driver = Driver(clock, directory, dhcp, leases_path, manifests,
                        scenario.intent_delay_ms, scenario.poll_interval_ms,
                        scenario.duration_ms, run_log)
        driver.connect_fabric(bridge)
        driver.start()

        def make_injector() -> Callable[[Ipv4Packet], None]:
            return lambda pkt: clock.schedule(clock.now,
                                              lambda: router.route(CLOUD, pkt))

        devices = []
        for index in range(scenario.device_count):
            dev = Device(index, clock, directory, scenario.seed)
            dev.connect_fabric(bridge)
            dev.remote_injector = make_injector()
            devices.append(dev)
            clock.schedule(index * BOOT_STAGGER_MS, dev.boot)

        for at in range(ANOMALY_SCAN_MS, scenario.duration_ms + 1, ANOMALY_SCAN_MS):
            clock.schedule(at, lambda: router.scan_anomalies())

        clock.run_until(scenario.duration_ms)
        router.scan_anomalies(scenario.duration_ms)

        connected = {s.ip: s.connected_at for s in driver.sessions.values()
                     if s.connected_at is not None}
        return build_report(scenario, router, devices, run_log, connected)
    finally:
        if frame_log_file is not None:
            frame_log_file.close()
        shutil.rmtree(tmpdir, ignore_errors=True)
