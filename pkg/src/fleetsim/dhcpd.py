"""DHCP server: DORA state machine, address pool, and the dhcpd.leases file.

The wire format is a compact BOOTP-style layout: a fixed 23-byte header
(op, xid, ciaddr, yiaddr, siaddr, chaddr) followed by TLV options terminated
by tag 255. The leases file is the polling surface for the test driver.
"""

from __future__ import annotations

import logging
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from pathlib import Path
from typing import Callable, Iterator, Optional

from .netfabric import MacAddr

log = logging.getLogger(__name__)

DHCP_SERVER_PORT = 67
DHCP_CLIENT_PORT = 68

OP_REQUEST = 1
OP_REPLY = 2

OPT_SUBNET_MASK = 1
OPT_ROUTER = 3
OPT_REQUESTED_IP = 50
OPT_LEASE_SECONDS = 51
OPT_MESSAGE_TYPE = 53
OPT_SERVER_ID = 54
OPT_END = 255

MSG_DISCOVER = 1
MSG_OFFER = 2
MSG_REQUEST = 3
MSG_ACK = 5
MSG_NAK = 6

_HEADER = struct.Struct("!BI4s4s4s6s")  # op, xid, ciaddr, yiaddr, siaddr, chaddr

ZERO_IP = IPv4Address("0.0.0.0")


class DhcpDecodeError(Exception):
    """Byte buffer does not decode as a DHCP message."""


@dataclass
class DhcpMessage:
    op: int
    xid: int
    ciaddr: IPv4Address
    yiaddr: IPv4Address
    siaddr: IPv4Address
    chaddr: MacAddr
    options: list[tuple[int, bytes]] = field(default_factory=list)

    def option(self, tag: int) -> Optional[bytes]:
        for t, value in self.options:
            if t == tag:
                return value
        return None

    @property
    def message_type(self) -> int:
        value = self.option(OPT_MESSAGE_TYPE)
        if value is None or len(value) != 1:
            raise DhcpDecodeError("missing message-type option")
        return value[0]

    def _ip_option(self, tag: int) -> Optional[IPv4Address]:
        value = self.option(tag)
        return IPv4Address(value) if value is not None and len(value) == 4 else None

    @property
    def requested_ip(self) -> Optional[IPv4Address]:
        return self._ip_option(OPT_REQUESTED_IP)

    @property
    def server_id(self) -> Optional[IPv4Address]:
        return self._ip_option(OPT_SERVER_ID)

    @property
    def router(self) -> Optional[IPv4Address]:
        return self._ip_option(OPT_ROUTER)

    @property
    def subnet_mask(self) -> Optional[IPv4Address]:
        return self._ip_option(OPT_SUBNET_MASK)

    @property
    def lease_seconds(self) -> Optional[int]:
        value = self.option(OPT_LEASE_SECONDS)
        return struct.unpack("!I", value)[0] if value is not None and len(value) == 4 else None

    def encode(self) -> bytes:
        if sum(1 for t, _ in self.options if t == OPT_MESSAGE_TYPE) != 1:
            raise ValueError("option 53 must be present exactly once")
        out = bytearray(_HEADER.pack(self.op, self.xid, self.ciaddr.packed,
                                     self.yiaddr.packed, self.siaddr.packed,
                                     self.chaddr.octets))
        for tag, value in self.options:
            if tag == OPT_END:
                raise ValueError("end tag is added automatically")
            if len(value) > 255:
                raise ValueError(f"option {tag} too long")
            out.append(tag)
            out.append(len(value))
            out.extend(value)
        out.append(OPT_END)
        return bytes(out)

    @classmethod
    def decode(cls, buf: bytes) -> "DhcpMessage":
        if len(buf) < _HEADER.size + 1:
            raise DhcpDecodeError(f"buffer too short ({len(buf)} bytes)")
        op, xid, ciaddr, yiaddr, siaddr, chaddr = _HEADER.unpack_from(buf)
        options: list[tuple[int, bytes]] = []
        i = _HEADER.size
        while True:
            if i >= len(buf):
                raise DhcpDecodeError("options not terminated by end tag")
            tag = buf[i]
            if tag == OPT_END:
                break
            if i + 1 >= len(buf):
                raise DhcpDecodeError("truncated option header")
            length = buf[i + 1]
            if i + 2 + length > len(buf):
                raise DhcpDecodeError(f"truncated option {tag}")
            options.append((tag, buf[i + 2:i + 2 + length]))
            i += 2 + length
        msg = cls(op, xid, IPv4Address(ciaddr), IPv4Address(yiaddr),
                  IPv4Address(siaddr), MacAddr(chaddr), options)
        if sum(1 for t, _ in options if t == OPT_MESSAGE_TYPE) != 1:
            raise DhcpDecodeError("option 53 must be present exactly once")
        return msg


def make_discover(xid: int, mac: MacAddr) -> DhcpMessage:
    return DhcpMessage(OP_REQUEST, xid, ZERO_IP, ZERO_IP, ZERO_IP, mac,
                       [(OPT_MESSAGE_TYPE, bytes([MSG_DISCOVER]))])


def make_request(xid: int, mac: MacAddr, requested: IPv4Address,
                 server_id: IPv4Address) -> DhcpMessage:
    return DhcpMessage(OP_REQUEST, xid, ZERO_IP, ZERO_IP, ZERO_IP, mac, [
        (OPT_MESSAGE_TYPE, bytes([MSG_REQUEST])),
        (OPT_REQUESTED_IP, requested.packed),
        (OPT_SERVER_ID, server_id.packed),
    ])


@dataclass
class AddressPool:
    first: IPv4Address
    last: IPv4Address
    subnet_mask: IPv4Address
    router: IPv4Address
    lease_seconds: int

    def __post_init__(self) -> None:
        if int(self.first) > int(self.last):
            raise ValueError(f"pool first {self.first} above last {self.last}")
        if self.first <= self.router <= self.last:
            raise ValueError(f"router {self.router} inside pool range")
        if self.lease_seconds <= 0:
            raise ValueError("lease_seconds must be positive")

    @property
    def size(self) -> int:
        return int(self.last) - int(self.first) + 1

    def __contains__(self, ip: IPv4Address) -> bool:
        return int(self.first) <= int(ip) <= int(self.last)

    def addresses(self) -> Iterator[IPv4Address]:
        for n in range(int(self.first), int(self.last) + 1):
            yield IPv4Address(n)


LEASE_ACTIVE = "active"
LEASE_EXPIRED = "expired"


@dataclass
class Lease:
    ip: IPv4Address
    mac: MacAddr
    starts_ms: int
    ends_ms: int
    state: str = LEASE_ACTIVE


class LeaseFileCorrupt(Exception):
    def __init__(self, line: int, reason: str) -> None:
        super().__init__(f"line {line}: {reason}")
        self.line = line


def _format_lease(lease: Lease) -> str:
    return (f"lease {lease.ip} {{\n"
            f"  starts {lease.starts_ms};\n"
            f"  ends {lease.ends_ms};\n"
            f"  hardware ethernet {lease.mac};\n"
            f"  binding state {lease.state};\n"
            f"}}\n\n")


def write_leases(leases: list[Lease], path: str | Path) -> None:
    """Atomically replace the leases file (write to a temp file, then rename)."""
    path = Path(path)
    text = "".join(_format_lease(lease) for lease in leases)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


_LEASE_OPEN = re.compile(r"^lease (\S+) \{$")
_FIELD_RES = [
    re.compile(r"^  starts (\d+);$"),
    re.compile(r"^  ends (\d+);$"),
    re.compile(r"^  hardware ethernet (\S+);$"),
    re.compile(r"^  binding state (active|expired);$"),
]


def parse_leases(path: str | Path) -> list[Lease]:
    """Parse a leases file; records come back in file (assignment) order."""
    lines = Path(path).read_text().split("\n")
    leases: list[Lease] = []
    i = 0
    while i < len(lines):
        if lines[i] == "":
            i += 1
            continue
        m = _LEASE_OPEN.match(lines[i])
        if m is None:
            raise LeaseFileCorrupt(i + 1, f"expected lease block, got {lines[i]!r}")
        try:
            ip = IPv4Address(m.group(1))
        except ValueError:
            raise LeaseFileCorrupt(i + 1, f"bad address {m.group(1)!r}") from None
        open_line = i
        fields: list[str] = []
        for offset, regex in enumerate(_FIELD_RES, start=1):
            if open_line + offset >= len(lines):
                raise LeaseFileCorrupt(len(lines), "truncated lease block")
            fm = regex.match(lines[open_line + offset])
            if fm is None:
                raise LeaseFileCorrupt(open_line + offset + 1,
                                       f"bad lease field {lines[open_line + offset]!r}")
            fields.append(fm.group(1))
        close = open_line + 5
        if close >= len(lines) or lines[close] != "}":
            raise LeaseFileCorrupt(close + 1, "unterminated lease block")
        try:
            mac = MacAddr.parse(fields[2])
        except ValueError:
            raise LeaseFileCorrupt(open_line + 4, f"bad MAC {fields[2]!r}") from None
        leases.append(Lease(ip, mac, int(fields[0]), int(fields[1]), fields[3]))
        i = close + 1
    return leases


class DhcpServer:
    """Address-pool manager answering DISCOVER/REQUEST with OFFER/ACK/NAK.

    Allocation is lowest-free-address with MAC affinity: a client holding an
    active binding (or a pending offer) is re-offered the same address. Offers
    reserve the address until the matching REQUEST arrives, so simultaneous
    DISCOVERs from distinct clients always receive distinct addresses.
    """

    def __init__(self, pool: AddressPool, server_id: IPv4Address,
                 leases_path: str | Path | None = None,
                 on_ack: Optional[Callable[[IPv4Address, MacAddr], None]] = None) -> None:
        self.pool = pool
        self.server_id = server_id
        self.leases_path = Path(leases_path) if leases_path is not None else None
        self.leases: list[Lease] = []
        self.offers: dict[MacAddr, IPv4Address] = {}
        self.pool_exhausted_events = 0
        self.on_ack = on_ack
        if self.leases_path is not None:
            self._persist()

    # -- queries ----------------------------------------------------------

    def active_leases(self) -> list[Lease]:
        return [l for l in self.leases if l.state == LEASE_ACTIVE]

    def _active_for_mac(self, mac: MacAddr) -> Optional[Lease]:
        for lease in self.leases:
            if lease.state == LEASE_ACTIVE and lease.mac == mac:
                return lease
        return None

    def _active_for_ip(self, ip: IPv4Address) -> Optional[Lease]:
        for lease in self.leases:
            if lease.state == LEASE_ACTIVE and lease.ip == ip:
                return lease
        return None

    def _lowest_free(self) -> Optional[IPv4Address]:
        taken = {l.ip for l in self.leases if l.state == LEASE_ACTIVE}
        taken.update(self.offers.values())
        for ip in self.pool.addresses():
            if ip not in taken:
                return ip
        return None

    # -- operations --------------------------------------------------------

    def handle_message(self, msg: DhcpMessage, now: int) -> Optional[DhcpMessage]:
        """Run one DORA step; returns the reply message, or None when silent."""
        if msg.op != OP_REQUEST:
            return None
        try:
            mtype = msg.message_type
        except DhcpDecodeError:
            return None
        self.expire_leases(now)
        if mtype == MSG_DISCOVER:
            return self._handle_discover(msg)
        if mtype == MSG_REQUEST:
            return self._handle_request(msg, now)
        return None

    def _handle_discover(self, msg: DhcpMessage) -> Optional[DhcpMessage]:
        active = self._active_for_mac(msg.chaddr)
        if active is not None:
            ip: Optional[IPv4Address] = active.ip
        elif msg.chaddr in self.offers:
            ip = self.offers[msg.chaddr]
        else:
            ip = self._lowest_free()
        if ip is None:
            self.pool_exhausted_events += 1
            log.warning("pool exhausted, ignoring DISCOVER from %s", msg.chaddr)
            return None
        self.offers[msg.chaddr] = ip
        return self._reply(msg, MSG_OFFER, ip)

    def _handle_request(self, msg: DhcpMessage, now: int) -> DhcpMessage:
        requested = msg.requested_ip
        if requested is None or requested not in self.pool:
            return self._reply(msg, MSG_NAK, ZERO_IP)
        active = self._active_for_mac(msg.chaddr)
        if active is not None and active.ip == requested:
            # Idempotent re-request: refresh the binding in place.
            active.starts_ms = now
            active.ends_ms = now + self.pool.lease_seconds * 1000
            self.offers.pop(msg.chaddr, None)
            self._persist()
            self._announce(active)
            return self._reply(msg, MSG_ACK, requested)
        if self.offers.get(msg.chaddr) == requested and self._active_for_ip(requested) is None:
            lease = Lease(requested, msg.chaddr, now,
                          now + self.pool.lease_seconds * 1000, LEASE_ACTIVE)
            self.leases.append(lease)
            del self.offers[msg.chaddr]
            self._persist()
            self._announce(lease)
            return self._reply(msg, MSG_ACK, requested)
        return self._reply(msg, MSG_NAK, ZERO_IP)

    def expire_leases(self, now: int) -> list[Lease]:
        """Expire every lease with ends_ms <= now; their addresses free up."""
        expired = [l for l in self.leases if l.state == LEASE_ACTIVE and l.ends_ms <= now]
        for lease in expired:
            lease.state = LEASE_EXPIRED
        if expired:
            self._persist()
        return expired

    # -- internals ----------------------------------------------------------

    def _announce(self, lease: Lease) -> None:
        if self.on_ack is not None:
            self.on_ack(lease.ip, lease.mac)

    def _persist(self) -> None:
        if self.leases_path is not None:
            write_leases(self.leases, self.leases_path)

    def _reply(self, msg: DhcpMessage, mtype: int, yiaddr: IPv4Address) -> DhcpMessage:
        options = [(OPT_MESSAGE_TYPE, bytes([mtype])),
                   (OPT_SERVER_ID, self.server_id.packed)]
        if mtype in (MSG_OFFER, MSG_ACK):
            options += [
                (OPT_LEASE_SECONDS, struct.pack("!I", self.pool.lease_seconds)),
                (OPT_SUBNET_MASK, self.pool.subnet_mask.packed),
                (OPT_ROUTER, self.pool.router.packed),
            ]
        return DhcpMessage(OP_REPLY, msg.xid, ZERO_IP, yiaddr, self.server_id,
                           msg.chaddr, options)
