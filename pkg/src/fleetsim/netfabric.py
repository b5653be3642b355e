"""Virtual Ethernet fabric: simulation clock, addressing, packet codecs and a
learning bridge.

Everything is single-threaded and deterministic: the clock dispatches events
in (time, insertion-order) order and the bridge delivers frames synchronously
in ascending port order.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass
from ipaddress import IPv4Address
from typing import Callable, Optional, Union

MTU = 1500
ETHERTYPE_IPV4 = 0x0800
PROTO_TCP = 6
PROTO_UDP = 17
SUPPORTED_PROTOS = (PROTO_TCP, PROTO_UDP)

# TCP flag bits (subset carried on the wire; others rejected on decode)
TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_ACK = 0x10
_TCP_KNOWN_FLAGS = TCP_FIN | TCP_SYN | TCP_RST | TCP_ACK


class FabricError(Exception):
    """Base class for fabric-level failures."""


class SchedulingInPast(FabricError):
    """An event was scheduled before the current simulation time."""


class SimulationIdle(FabricError):
    """step() was called with an empty event queue."""


class DuplicateEndpoint(FabricError):
    """The same MAC address was attached to the bridge twice."""


class MalformedPacket(FabricError):
    """A byte buffer does not decode as a well-formed packet."""


class UnsupportedProtocol(MalformedPacket):
    """IP protocol number outside the supported set (TCP=6, UDP=17)."""


@dataclass(frozen=True, order=True)
class MacAddr:
    octets: bytes

    def __post_init__(self) -> None:
        if len(self.octets) != 6:
            raise ValueError(f"MAC needs 6 octets, got {len(self.octets)}")

    @classmethod
    def parse(cls, text: str) -> "MacAddr":
        parts = text.split(":")
        if len(parts) != 6:
            raise ValueError(f"bad MAC address {text!r}")
        try:
            return cls(bytes(int(p, 16) for p in parts))
        except ValueError as exc:
            raise ValueError(f"bad MAC address {text!r}") from exc

    @classmethod
    def device_mac(cls, index: int) -> "MacAddr":
        # Deterministic per-device identity: 02:00:00:00:<hi>:<lo>.
        if not 0 <= index <= 0xFFFF:
            raise ValueError(f"device index {index} out of range")
        return cls(bytes([0x02, 0, 0, 0, index >> 8, index & 0xFF]))

    def __str__(self) -> str:
        return ":".join(f"{b:02x}" for b in self.octets)


BROADCAST_MAC = MacAddr(b"\xff" * 6)
BROADCAST_IP = IPv4Address("255.255.255.255")


class SimClock:
    """Millisecond virtual clock with a (time, insertion-order) event queue.

    Events are arbitrary objects; callables are invoked when dispatched.
    """

    def __init__(self) -> None:
        self.now = 0
        self._heap: list[tuple[int, int, object]] = []
        self._seq = 0

    def schedule(self, at_ms: int, event: object) -> int:
        if at_ms < self.now:
            raise SchedulingInPast(f"t={at_ms} is before now={self.now}")
        self._seq += 1
        heapq.heappush(self._heap, (at_ms, self._seq, event))
        return self._seq

    def step(self) -> object:
        """Advance to the earliest event, dispatch it, and return it."""
        if not self._heap:
            raise SimulationIdle("no pending events")
        at_ms, _, event = heapq.heappop(self._heap)
        self.now = at_ms
        if callable(event):
            event()
        return event

    def run_until(self, t_ms: int) -> int:
        """Dispatch every event due at or before t_ms; returns count fired."""
        fired = 0
        while self._heap and self._heap[0][0] <= t_ms:
            self.step()
            fired += 1
        if t_ms > self.now:
            self.now = t_ms
        return fired

    @property
    def pending(self) -> int:
        return len(self._heap)


@dataclass(frozen=True)
class UdpSegment:
    src_port: int
    dst_port: int
    payload: bytes = b""


@dataclass(frozen=True)
class TcpSegment:
    src_port: int
    dst_port: int
    flags: int = 0
    seq: int = 0
    payload: bytes = b""


Segment = Union[UdpSegment, TcpSegment]


@dataclass(frozen=True)
class Ipv4Packet:
    src: IPv4Address
    dst: IPv4Address
    ttl: int
    segment: Segment

    @property
    def proto(self) -> int:
        return PROTO_UDP if isinstance(self.segment, UdpSegment) else PROTO_TCP

    @property
    def payload(self) -> bytes:
        return self.segment.payload

    @property
    def total_length(self) -> int:
        if isinstance(self.segment, UdpSegment):
            return _IP_HDR.size + _UDP_HDR.size + len(self.segment.payload)
        return _IP_HDR.size + _TCP_HDR.size + len(self.segment.payload)


# ver_ihl, tos, total_len, id, flags_frag, ttl, proto, checksum, src, dst
_IP_HDR = struct.Struct("!BBHHHBBH4s4s")
# src_port, dst_port, length, checksum
_UDP_HDR = struct.Struct("!HHHH")
# src_port, dst_port, seq, ack, offset, flags, window, checksum, urgent
_TCP_HDR = struct.Struct("!HHIIBBHHH")


def encode_packet(pkt: Ipv4Packet) -> bytes:
    """Serialize an IPv4 packet; multi-octet fields big-endian, checksums zero."""
    seg = pkt.segment
    if isinstance(seg, UdpSegment):
        l4 = _UDP_HDR.pack(seg.src_port, seg.dst_port,
                           _UDP_HDR.size + len(seg.payload), 0) + seg.payload
    elif isinstance(seg, TcpSegment):
        if seg.flags & ~_TCP_KNOWN_FLAGS:
            raise ValueError(f"unsupported TCP flags 0x{seg.flags:02x}")
        l4 = _TCP_HDR.pack(seg.src_port, seg.dst_port, seg.seq, 0,
                           5 << 4, seg.flags, 0xFFFF, 0, 0) + seg.payload
    else:
        raise UnsupportedProtocol(f"cannot encode segment {type(seg).__name__}")
    hdr = _IP_HDR.pack(0x45, 0, _IP_HDR.size + len(l4), 0, 0, pkt.ttl,
                       pkt.proto, 0, pkt.src.packed, pkt.dst.packed)
    return hdr + l4


def decode_packet(buf: bytes) -> Ipv4Packet:
    """Decode bytes into an Ipv4Packet or raise MalformedPacket."""
    if len(buf) < _IP_HDR.size:
        raise MalformedPacket(f"buffer too short for IPv4 header ({len(buf)} bytes)")
    ver_ihl, _, total_len, _, _, ttl, proto, _, src, dst = _IP_HDR.unpack_from(buf)
    if ver_ihl != 0x45:
        raise MalformedPacket(f"unexpected version/IHL byte 0x{ver_ihl:02x}")
    if total_len != len(buf):
        raise MalformedPacket(f"total_length {total_len} != buffer {len(buf)}")
    body = buf[_IP_HDR.size:]
    if proto == PROTO_UDP:
        if len(body) < _UDP_HDR.size:
            raise MalformedPacket("truncated UDP header")
        sport, dport, length, _ = _UDP_HDR.unpack_from(body)
        if length != len(body):
            raise MalformedPacket(f"UDP length {length} != segment {len(body)}")
        segment: Segment = UdpSegment(sport, dport, body[_UDP_HDR.size:])
    elif proto == PROTO_TCP:
        if len(body) < _TCP_HDR.size:
            raise MalformedPacket("truncated TCP header")
        sport, dport, seq, _, offset, flags, _, _, _ = _TCP_HDR.unpack_from(body)
        if offset != 5 << 4:
            raise MalformedPacket(f"unsupported TCP data offset 0x{offset:02x}")
        if flags & ~_TCP_KNOWN_FLAGS:
            raise MalformedPacket(f"unknown TCP flags 0x{flags:02x}")
        segment = TcpSegment(sport, dport, flags, seq, body[_TCP_HDR.size:])
    else:
        raise UnsupportedProtocol(f"protocol {proto} not in supported set")
    return Ipv4Packet(IPv4Address(src), IPv4Address(dst), ttl, segment)


def udp_packet(src: IPv4Address, src_port: int, dst: IPv4Address, dst_port: int,
               payload: bytes = b"", ttl: int = 64) -> Ipv4Packet:
    return Ipv4Packet(src, dst, ttl, UdpSegment(src_port, dst_port, payload))


def tcp_packet(src: IPv4Address, src_port: int, dst: IPv4Address, dst_port: int,
               flags: int = 0, seq: int = 0, payload: bytes = b"",
               ttl: int = 64) -> Ipv4Packet:
    return Ipv4Packet(src, dst, ttl, TcpSegment(src_port, dst_port, flags, seq, payload))


@dataclass(frozen=True)
class Frame:
    """Ethernet frame; ethertype 0x0800 payloads carry encoded IPv4 packets."""

    dst: MacAddr
    src: MacAddr
    payload: bytes = b""
    ethertype: int = ETHERTYPE_IPV4

    def __post_init__(self) -> None:
        if len(self.payload) > MTU:
            raise ValueError(f"payload {len(self.payload)} exceeds MTU {MTU}")

    def encode(self) -> bytes:
        return self.dst.octets + self.src.octets + struct.pack("!H", self.ethertype) + self.payload

    @classmethod
    def decode(cls, buf: bytes) -> "Frame":
        if len(buf) < 14:
            raise MalformedPacket(f"buffer too short for Ethernet header ({len(buf)} bytes)")
        ethertype = struct.unpack_from("!H", buf, 12)[0]
        return cls(MacAddr(buf[0:6]), MacAddr(buf[6:12]), buf[14:], ethertype)


FrameReceiver = Callable[[Frame], None]


class Bridge:
    """Learning bridge; port ids are dense integers in attachment order.

    A learned unicast destination is delivered to exactly its learned port,
    everything else floods to all ports except the ingress.
    """

    def __init__(self, clock: Optional[SimClock] = None,
                 frame_sink: Optional[Callable[[str], None]] = None) -> None:
        self._ports: list[tuple[MacAddr, FrameReceiver]] = []
        self._attached: dict[MacAddr, int] = {}
        self.table: dict[MacAddr, int] = {}
        self._clock = clock
        self._frame_sink = frame_sink

    def attach_port(self, mac: MacAddr, receiver: FrameReceiver) -> int:
        if mac in self._attached:
            raise DuplicateEndpoint(f"{mac} already attached")
        port_id = len(self._ports)
        self._ports.append((mac, receiver))
        self._attached[mac] = port_id
        return port_id

    @property
    def port_count(self) -> int:
        return len(self._ports)

    def forward(self, ingress_port: int, frame: Frame) -> set[int]:
        """Deliver a frame and return the set of ports it reached."""
        if not 0 <= ingress_port < len(self._ports):
            raise FabricError(f"unknown ingress port {ingress_port}")
        if frame.src != BROADCAST_MAC:
            self.table[frame.src] = ingress_port
        learned = self.table.get(frame.dst)
        if frame.dst != BROADCAST_MAC and learned is not None:
            targets = {learned}
        else:
            targets = {p for p in range(len(self._ports)) if p != ingress_port}
        for port in sorted(targets):
            self._ports[port][1](frame)
        if self._frame_sink is not None and targets:
            now = self._clock.now if self._clock is not None else 0
            self._frame_sink(
                f"{now}\t{frame.src}\t{frame.dst}\t0x{frame.ethertype:04x}\t{len(frame.payload) + 14}\n")
        return targets


class MacDirectory:
    """IP-to-MAC side table published by the DHCP server (the fabric has no ARP)."""

    def __init__(self) -> None:
        self._entries: dict[IPv4Address, MacAddr] = {}

    def publish(self, ip: IPv4Address, mac: MacAddr) -> None:
        self._entries[ip] = mac

    def lookup(self, ip: IPv4Address) -> Optional[MacAddr]:
        return self._entries.get(ip)
