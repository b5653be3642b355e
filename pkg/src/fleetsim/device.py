"""A virtual smartphone: DHCP client, package registry, intent dispatch, and a
text control agent on tcp/5555.

The control protocol is a simplified stand-in for adb: LF-terminated UTF-8
command lines, each answered by zero or more body lines and exactly one
terminator line (``Success`` or ``Failure [<reason>]``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from typing import Callable, Optional

from . import appmodels
from .appmodels import OUT, PacketIntent, derive_seed
from .dhcpd import (DHCP_CLIENT_PORT, DHCP_SERVER_PORT, MSG_ACK, MSG_NAK,
                    MSG_OFFER, OP_REPLY, DhcpDecodeError, DhcpMessage,
                    make_discover, make_request)
from .netfabric import (BROADCAST_IP, BROADCAST_MAC, PROTO_UDP, TCP_ACK,
                        TCP_RST, TCP_SYN, Bridge, Frame, Ipv4Packet, MacAddr,
                        MacDirectory, MalformedPacket, SimClock, TcpSegment,
                        UdpSegment, decode_packet, encode_packet, tcp_packet,
                        udp_packet)

log = logging.getLogger(__name__)

CONTROL_PORT = 5555
DISCOVER_RETRY_MS = 2000
DISCOVER_ATTEMPTS = 3
MANIFEST_MAX_BYTES = 65536

POWERED_OFF = "PoweredOff"
DISCOVERING = "Discovering"
REQUESTING = "Requesting"
ONLINE = "Online"


class PreconditionViolated(Exception):
    """An operation was invoked in a state its contract forbids."""


class NoActivityForIntent(Exception):
    """No installed package resolves the intent."""


@dataclass(frozen=True)
class Intent:
    action: Optional[str] = None
    component: Optional[tuple[str, str]] = None
    extras: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if self.action is None and self.component is None:
            raise PreconditionViolated("intent needs an action or a component")


@dataclass
class AppManifest:
    package: str
    apk_name: str
    version: str
    activities: tuple[tuple[str, tuple[str, ...]], ...]
    launch_activity: str
    traffic_model: str
    traffic_params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.package:
            raise ValueError("package must be non-empty")
        names = [name for name, _ in self.activities]
        if self.launch_activity not in names:
            raise ValueError(f"launch activity {self.launch_activity!r} not declared")
        if self.traffic_model not in appmodels.MODEL_IDS:
            raise ValueError(f"unknown traffic model {self.traffic_model!r}")


def manifest_from_json(text: str | bytes) -> AppManifest:
    """Parse manifest JSON; raises ValueError for anything malformed."""
    try:
        raw = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValueError("manifest must be a JSON object")
    try:
        activities = tuple(
            (entry["name"], tuple(entry.get("actions", [])))
            for entry in raw["activities"]
        )
        model = raw["traffic_model"]
        return AppManifest(
            package=raw["package"],
            apk_name=raw["apk_name"],
            version=raw.get("version", "0"),
            activities=activities,
            launch_activity=raw["launch_activity"],
            traffic_model=model["model"],
            traffic_params=dict(model.get("params", {})),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"bad manifest structure: {exc}") from exc


def manifest_to_json(manifest: AppManifest) -> str:
    return json.dumps({
        "package": manifest.package,
        "apk_name": manifest.apk_name,
        "version": manifest.version,
        "activities": [{"name": name, "actions": list(actions)}
                       for name, actions in manifest.activities],
        "launch_activity": manifest.launch_activity,
        "traffic_model": {"model": manifest.traffic_model,
                          "params": manifest.traffic_params},
    }, indent=2)


class _AgentSession:
    """Server side of one control connection."""

    def __init__(self, peer_mac: MacAddr, peer_ip: IPv4Address, peer_port: int) -> None:
        self.peer_mac = peer_mac
        self.peer_ip = peer_ip
        self.peer_port = peer_port
        self.rx = bytearray()
        self.out_seq = 0
        self.pending_install: Optional[tuple[str, int]] = None


class Device:
    """One virtual phone driven entirely by the simulation loop."""

    def __init__(self, index: int, clock: SimClock, directory: MacDirectory,
                 scenario_seed: int = 0) -> None:
        self.index = index
        self.mac = MacAddr.device_mac(index)
        self.clock = clock
        self.directory = directory
        self.scenario_seed = scenario_seed

        self.boot_state = POWERED_OFF
        self.ip: Optional[IPv4Address] = None
        self.gateway: Optional[IPv4Address] = None
        self.subnet_mask: Optional[IPv4Address] = None
        self.online_at: Optional[int] = None
        self.boot_failed_at: Optional[int] = None

        self.packages: dict[str, AppManifest] = {}
        self.running: Optional[tuple[str, str]] = None
        self.launch_log: list[tuple[int, str, str]] = []

        self._xid = 0x0A000000 + index
        self._discover_attempts = 0
        self._server_id: Optional[IPv4Address] = None
        self._gateway_mac: Optional[MacAddr] = None

        self._model: Optional[appmodels.TrafficModel] = None
        self._model_port = 0
        self._model_gen = 0
        self._eph_port = 40000

        self.listening = False
        self._sessions: dict[tuple[IPv4Address, int], _AgentSession] = {}

        self.remote_injector: Optional[Callable[[Ipv4Packet], None]] = None
        self._send_frame: Optional[Callable[[Frame], None]] = None

        self.app_tx_pkts = 0
        self.app_tx_bytes = 0
        self.app_rx_pkts = 0
        self.app_rx_bytes = 0
        self.decode_errors = 0

    # -- fabric wiring ------------------------------------------------------

    def connect_fabric(self, bridge: Bridge) -> int:
        port = bridge.attach_port(self.mac, self._on_frame)
        self._send_frame = lambda frame: bridge.forward(port, frame)
        return port

    def _send(self, frame: Frame) -> None:
        if self._send_frame is None:
            raise PreconditionViolated("device not attached to a bridge")
        self._send_frame(frame)

    # -- boot / DHCP client --------------------------------------------------

    def boot(self) -> None:
        """Start the DORA exchange; the device turns Online on ACK."""
        if self.boot_state != POWERED_OFF:
            raise PreconditionViolated(f"boot in state {self.boot_state}")
        self.boot_state = DISCOVERING
        self._discover_attempts = 0
        self._send_discover()

    def _send_discover(self) -> None:
        self._discover_attempts += 1
        msg = make_discover(self._xid, self.mac)
        pkt = udp_packet(IPv4Address("0.0.0.0"), DHCP_CLIENT_PORT,
                         BROADCAST_IP, DHCP_SERVER_PORT, msg.encode())
        self._send(Frame(BROADCAST_MAC, self.mac, encode_packet(pkt)))
        attempt = self._discover_attempts
        self.clock.schedule(self.clock.now + DISCOVER_RETRY_MS,
                            lambda: self._discover_timeout(attempt))

    def _discover_timeout(self, attempt: int) -> None:
        if self.boot_state != DISCOVERING or attempt != self._discover_attempts:
            return
        if self._discover_attempts >= DISCOVER_ATTEMPTS:
            self.boot_state = POWERED_OFF
            self.boot_failed_at = self.clock.now
            log.warning("device %d boot failed after %d DISCOVERs",
                        self.index, self._discover_attempts)
            return
        self._send_discover()

    def _dhcp_rx(self, msg: DhcpMessage) -> None:
        if msg.op != OP_REPLY or msg.xid != self._xid or msg.chaddr != self.mac:
            return
        try:
            mtype = msg.message_type
        except DhcpDecodeError:
            return
        if mtype == MSG_OFFER and self.boot_state == DISCOVERING:
            self._server_id = msg.server_id or msg.siaddr
            self.boot_state = REQUESTING
            request = make_request(self._xid, self.mac, msg.yiaddr, self._server_id)
            pkt = udp_packet(IPv4Address("0.0.0.0"), DHCP_CLIENT_PORT,
                             BROADCAST_IP, DHCP_SERVER_PORT, request.encode())
            self._send(Frame(BROADCAST_MAC, self.mac, encode_packet(pkt)))
        elif mtype == MSG_ACK and self.boot_state == REQUESTING:
            self.ip = msg.yiaddr
            self.gateway = msg.router
            self.subnet_mask = msg.subnet_mask
            self.boot_state = ONLINE
            self.online_at = self.clock.now
            self.listening = True
        elif mtype == MSG_NAK and self.boot_state == REQUESTING:
            self.boot_state = DISCOVERING
            self._discover_attempts = 0
            self._send_discover()

    # -- frame dispatch -------------------------------------------------------

    def _on_frame(self, frame: Frame) -> None:
        if frame.dst not in (self.mac, BROADCAST_MAC):
            return
        try:
            pkt = decode_packet(frame.payload)
        except MalformedPacket:
            self.decode_errors += 1
            return
        seg = pkt.segment
        if isinstance(seg, UdpSegment) and seg.dst_port == DHCP_CLIENT_PORT:
            try:
                self._dhcp_rx(DhcpMessage.decode(seg.payload))
            except DhcpDecodeError:
                self.decode_errors += 1
            return
        if isinstance(seg, TcpSegment) and seg.dst_port == CONTROL_PORT:
            self._control_rx(frame.src, pkt, seg)
            return
        if self.ip is None or pkt.dst != self.ip:
            return
        if self._model is not None and seg.dst_port == self._model_port:
            self.app_rx_pkts += 1
            self.app_rx_bytes += len(seg.payload)

    # -- control agent ----------------------------------------------------------

    def _control_reply(self, session: _AgentSession, flags: int, payload: bytes = b"") -> None:
        assert self.ip is not None
        pkt = tcp_packet(self.ip, CONTROL_PORT, session.peer_ip, session.peer_port,
                         flags, session.out_seq, payload)
        session.out_seq += len(payload)
        self._send(Frame(session.peer_mac, self.mac, encode_packet(pkt)))

    def _control_rx(self, src_mac: MacAddr, pkt: Ipv4Packet, seg: TcpSegment) -> None:
        key = (pkt.src, seg.src_port)
        # Refusals answer with the address the peer targeted: the device may
        # not own an address yet (still Discovering) and must still say no.
        reject = tcp_packet(pkt.dst, CONTROL_PORT, pkt.src, seg.src_port, TCP_RST)
        if seg.flags & TCP_SYN and not seg.flags & TCP_ACK:
            if not self.listening or pkt.dst != self.ip:
                self._send(Frame(src_mac, self.mac, encode_packet(reject)))
                return
            session = _AgentSession(src_mac, pkt.src, seg.src_port)
            self._sessions[key] = session
            self._control_reply(session, TCP_SYN | TCP_ACK)
            return
        session = self._sessions.get(key)
        if session is None:
            if not seg.flags & TCP_RST:
                self._send(Frame(src_mac, self.mac, encode_packet(reject)))
            return
        if seg.payload:
            session.rx.extend(seg.payload)
            self._agent_drain(session)

    def _agent_drain(self, session: _AgentSession) -> None:
        responses: list[str] = []
        while True:
            if session.pending_install is not None:
                apk_name, count = session.pending_install
                if len(session.rx) < count:
                    break
                payload = bytes(session.rx[:count])
                del session.rx[:count]
                session.pending_install = None
                responses.extend(self._cmd_install(apk_name, str(count), payload))
                continue
            newline = session.rx.find(b"\n")
            if newline < 0:
                break
            line = session.rx[:newline].decode("utf-8", errors="replace")
            del session.rx[:newline + 1]
            tokens = line.split()
            if len(tokens) == 3 and tokens[0] == "install":
                try:
                    count = int(tokens[2])
                except ValueError:
                    count = -1
                if 0 <= count <= MANIFEST_MAX_BYTES:
                    session.pending_install = (tokens[1], count)
                    continue
                responses.append("Failure [invalid manifest]")
                continue
            responses.extend(self.handle_control_line(line))
        if responses:
            body = "".join(r + "\n" for r in responses).encode()
            for i in range(0, len(body), 1200):
                self._control_reply(session, TCP_ACK, body[i:i + 1200])

    def handle_control_line(self, line: str, payload: bytes = b"") -> list[str]:
        """Execute one control command; always ends with one terminator line."""
        if self.boot_state != ONLINE:
            raise PreconditionViolated("control agent only runs while Online")
        tokens = line.rstrip("\n").split()
        if tokens[:4] == ["shell", "pm", "list", "packages"] and tokens[4:] == ["-f"]:
            return self._cmd_list_packages()
        if tokens[:3] == ["shell", "pm", "uninstall"] and len(tokens) == 4:
            return self._cmd_uninstall(tokens[3])
        if tokens[:3] == ["shell", "am", "start"] and len(tokens) == 5:
            if tokens[3] == "-a":
                return self._cmd_am_start(Intent(action=tokens[4]), f"act={tokens[4]}")
            if tokens[3] == "-n":
                pkg, _, activity = tokens[4].partition("/")
                if not pkg or not activity:
                    return ["Failure [bad component]"]
                intent = Intent(component=(pkg, activity))
                return self._cmd_am_start(intent, f"cmp={tokens[4]}")
        if tokens[:3] == ["shell", "am", "force-stop"] and len(tokens) == 4:
            self.force_stop(tokens[3])
            return ["Success"]
        if tokens[:1] == ["install"] and len(tokens) == 3:
            return self._cmd_install(tokens[1], tokens[2], payload)
        return ["Failure [unknown command]"]

    def _cmd_list_packages(self) -> list[str]:
        body = [f"package:/data/app/{m.apk_name}={m.package}"
                for m in self.packages.values()]
        return body + ["Success"]

    def _cmd_uninstall(self, package: str) -> list[str]:
        if package not in self.packages:
            return ["Failure [not installed]"]
        self.force_stop(package)
        del self.packages[package]
        return ["Success"]

    def _cmd_am_start(self, intent: Intent, detail: str) -> list[str]:
        try:
            self.start_intent(intent)
        except NoActivityForIntent:
            reason = ("no activity for action" if intent.action is not None
                      else "component not found")
            return [f"Failure [{reason}]"]
        return [f"Starting: Intent {{ {detail} }}", "Success"]

    def _cmd_install(self, apk_name: str, count_text: str, payload: bytes) -> list[str]:
        try:
            count = int(count_text)
        except ValueError:
            return ["Failure [invalid manifest]"]
        if count != len(payload) or count > MANIFEST_MAX_BYTES:
            return ["Failure [invalid manifest]"]
        try:
            manifest = manifest_from_json(payload)
        except ValueError:
            return ["Failure [invalid manifest]"]
        if manifest.apk_name != apk_name:
            return ["Failure [invalid manifest]"]
        self.install(manifest)
        return ["Success"]

    # -- package / intent operations ----------------------------------------------

    def install(self, manifest: AppManifest) -> None:
        """Add or replace (-r semantics) a package in the registry."""
        if self.boot_state != ONLINE:
            raise PreconditionViolated("install requires an Online device")
        self.packages[manifest.package] = manifest

    def start_intent(self, intent: Intent) -> tuple[str, str]:
        """Resolve the intent, stop any running activity, start the new one."""
        if self.boot_state != ONLINE:
            raise PreconditionViolated("start_intent requires an Online device")
        resolved: Optional[tuple[AppManifest, str]] = None
        if intent.component is not None:
            pkg, activity = intent.component
            manifest = self.packages.get(pkg)
            if manifest is not None and any(name == activity for name, _ in manifest.activities):
                resolved = (manifest, activity)
        else:
            for manifest in self.packages.values():
                for name, actions in manifest.activities:
                    if intent.action in actions:
                        resolved = (manifest, name)
                        break
                if resolved is not None:
                    break
        if resolved is None:
            raise NoActivityForIntent(str(intent))
        manifest, activity = resolved
        self._stop_model()
        seed = derive_seed(self.scenario_seed, self.index, manifest.package)
        self._model = appmodels.spawn(manifest.traffic_model,
                                      manifest.traffic_params, seed)
        self._eph_port += 1
        self._model_port = self._eph_port
        self.running = (manifest.package, activity)
        self.launch_log.append((self.clock.now, manifest.package, activity))
        generation = self._model_gen
        self.clock.schedule(self.clock.now, lambda: self._model_wake(generation))
        return manifest.package, activity

    def force_stop(self, package: str) -> None:
        """Halt the package's activity and traffic model; no-op if not running."""
        if self.running is not None and self.running[0] == package:
            self._stop_model()

    def _stop_model(self) -> None:
        self._model_gen += 1
        self._model = None
        self.running = None

    # -- traffic engine ---------------------------------------------------------

    def _model_wake(self, generation: int) -> None:
        if generation != self._model_gen or self._model is None:
            return
        model = self._model
        intents, next_wake = model.next_events(self.clock.now)
        for intent in intents:
            self._emit(intent)
        if next_wake is not None:
            self.clock.schedule(next_wake, lambda: self._model_wake(generation))

    def _emit(self, intent: PacketIntent) -> None:
        assert self.ip is not None
        remote = intent.remote
        if intent.direction == OUT:
            if intent.proto == PROTO_UDP:
                pkt = udp_packet(self.ip, self._model_port, remote.ip, remote.port,
                                 intent.payload)
            else:
                pkt = tcp_packet(self.ip, self._model_port, remote.ip, remote.port,
                                 intent.flags, intent.seq, intent.payload)
            gateway_mac = self._resolve_gateway()
            if gateway_mac is None:
                log.debug("device %d has no gateway MAC, dropping packet", self.index)
                return
            self._send(Frame(gateway_mac, self.mac, encode_packet(pkt)))
            self.app_tx_pkts += 1
            self.app_tx_bytes += len(intent.payload)
        else:
            if intent.proto == PROTO_UDP:
                pkt = udp_packet(remote.ip, remote.port, self.ip, self._model_port,
                                 intent.payload)
            else:
                pkt = tcp_packet(remote.ip, remote.port, self.ip, self._model_port,
                                 intent.flags, intent.seq, intent.payload)
            if self.remote_injector is not None:
                self.remote_injector(pkt)

    def _resolve_gateway(self) -> Optional[MacAddr]:
        if self._gateway_mac is None and self.gateway is not None:
            self._gateway_mac = self.directory.lookup(self.gateway)
        return self._gateway_mac
