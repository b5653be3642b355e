"""Seeded traffic generators standing in for real apps.

Each model is a pure phase machine: given (model id, params, seed) it emits an
identical packet script on every run. Models describe both directions of the
conversation; the hosting device supplies network identity and the return
path. Signature-bearing constants here (probe marker, Host literal, trigger
magic, ports) are mirrored by the default signature rules so classification
is exact by construction.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from ipaddress import IPv4Address
from typing import Optional

from .netfabric import PROTO_TCP, PROTO_UDP, TCP_ACK, TCP_SYN

OUT = "out"  # device -> cloud
IN = "in"    # cloud -> device

VOIP_CALL = "voip_call"
SOCIAL_FEED = "social_feed"
GAME_BURST = "game_burst"
UNKNOWN_APP = "unknown_app"

# VoIP probe constant matched by the default skype_like rule.
VOIP_PROBE_MARKER = 0x02
VOIP_PROBE_OFFSET = 2
VOIP_PROBE_LEN = 64
# Game trigger magic matched by the default game_like rule.
GAME_TRIGGER_MAGIC = b"GAME"


class UnknownModel(Exception):
    """spawn() was asked for a model id that does not exist."""


class ModelExhausted(Exception):
    """next_events() was called after the model reported Done."""


@dataclass(frozen=True)
class RemoteEndpoint:
    """A cloud-side peer living behind the gateway."""

    label: str
    ip: IPv4Address
    port: int


MEDIA_RELAY = RemoteEndpoint("media_relay", IPv4Address("198.51.100.10"), 3478)
FEED_SERVER = RemoteEndpoint("feed_server", IPv4Address("198.51.100.20"), 443)
GAME_CDN = RemoteEndpoint("game_cdn", IPv4Address("198.51.100.30"), 8080)
MYSTERY_SINK = RemoteEndpoint("mystery_sink", IPv4Address("198.51.100.99"), 9999)


@dataclass(frozen=True)
class PacketIntent:
    """One packet of the scripted conversation, net identity left abstract."""

    direction: str
    proto: int
    remote: RemoteEndpoint
    payload: bytes = b""
    flags: int = 0
    seq: int = 0


def derive_seed(scenario_seed: int, device_index: int, package: str) -> int:
    """Stable 64-bit per-(device, package) stream seed."""
    digest = hashlib.blake2b(f"{scenario_seed}|{device_index}|{package}".encode(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "big")


class TrafficModel:
    """Base phase machine. Subclasses implement _advance()."""

    model_id = ""
    defaults: dict = {}

    def __init__(self, params: dict, seed: int) -> None:
        merged = dict(self.defaults)
        for key, value in params.items():
            if key not in merged:
                raise ValueError(f"unknown {self.model_id} parameter {key!r}")
            merged[key] = value
        self.params = merged
        self.rng = random.Random(seed)
        self.done = False
        self.emitted_out_pkts = 0
        self.emitted_out_bytes = 0
        self.emitted_in_pkts = 0
        self.emitted_in_bytes = 0

    def next_events(self, now: int) -> tuple[list[PacketIntent], Optional[int]]:
        """Return packets due now and the next wake time (None once Done)."""
        if self.done:
            raise ModelExhausted(self.model_id)
        intents, next_wake = self._advance(now)
        for intent in intents:
            if intent.direction == OUT:
                self.emitted_out_pkts += 1
                self.emitted_out_bytes += len(intent.payload)
            else:
                self.emitted_in_pkts += 1
                self.emitted_in_bytes += len(intent.payload)
        if next_wake is None:
            self.done = True
        return intents, next_wake

    def _advance(self, now: int) -> tuple[list[PacketIntent], Optional[int]]:
        raise NotImplementedError


class VoipCall(TrafficModel):
    """Skype-like call: 3 marker probes, then fixed-rate two-way media.

    Probes are 64-byte UDP datagrams carrying marker 0x02 at offset 2, sent
    100 ms apart. Media is 50 packets/s each way (20 ms spacing) with 160-byte
    payloads for call_duration_ms, then the model is Done.
    """

    model_id = VOIP_CALL
    defaults = {"call_duration_ms": 30_000}

    PROBE_GAP_MS = 100
    MEDIA_GAP_MS = 20
    MEDIA_PAYLOAD = 160

    def __init__(self, params: dict, seed: int) -> None:
        super().__init__(params, seed)
        self._probes_sent = 0
        self._media_ticks = self.params["call_duration_ms"] // self.MEDIA_GAP_MS
        self._ticks_done = 0

    def _probe_payload(self) -> bytes:
        body = bytearray(self.rng.randbytes(VOIP_PROBE_LEN))
        body[VOIP_PROBE_OFFSET] = VOIP_PROBE_MARKER
        return bytes(body)

    def _advance(self, now: int) -> tuple[list[PacketIntent], Optional[int]]:
        if self._probes_sent < 3:
            self._probes_sent += 1
            intents = [PacketIntent(OUT, PROTO_UDP, MEDIA_RELAY, self._probe_payload())]
            return intents, now + self.PROBE_GAP_MS
        self._ticks_done += 1
        intents = [
            PacketIntent(OUT, PROTO_UDP, MEDIA_RELAY, self.rng.randbytes(self.MEDIA_PAYLOAD)),
            PacketIntent(IN, PROTO_UDP, MEDIA_RELAY, self.rng.randbytes(self.MEDIA_PAYLOAD)),
        ]
        if self._ticks_done >= self._media_ticks:
            return intents, None
        return intents, now + self.MEDIA_GAP_MS


class SocialFeed(TrafficModel):
    """Facebook/Twitter-like feed: handshake, then request/response cycles.

    One TCP handshake to :443, then each cycle sends an HTTP-ish request
    carrying ``Host: <host>`` and receives k response segments, k drawn from
    [2, 6]. Cycles repeat every think_time_ms plus up to a second of seeded
    jitter, so differing seeds produce visibly different timing.
    """

    model_id = SOCIAL_FEED
    defaults = {"host": "m.social.test", "think_time_ms": 5_000}

    RESPONSE_GAP_MS = 15
    RESPONSE_DELAY_MS = 10

    def __init__(self, params: dict, seed: int) -> None:
        super().__init__(params, seed)
        self._step = 0          # 0 SYN, 1 SYN-ACK, 2 ACK+request, 3 responses
        self._cycle = 0
        self._responses_left = 0
        self._out_seq = 0
        self._in_seq = 0

    def _request(self) -> bytes:
        text = (f"GET /feed?cursor={self._cycle} HTTP/1.1\r\n"
                f"Host: {self.params['host']}\r\n"
                f"User-Agent: social-app/3.1\r\n\r\n")
        return text.encode()

    def _advance(self, now: int) -> tuple[list[PacketIntent], Optional[int]]:
        if self._step == 0:
            self._step = 1
            return [PacketIntent(OUT, PROTO_TCP, FEED_SERVER, flags=TCP_SYN)], now + 1
        if self._step == 1:
            self._step = 2
            return [PacketIntent(IN, PROTO_TCP, FEED_SERVER, flags=TCP_SYN | TCP_ACK)], now + 1
        if self._step == 2:
            body = self._request()
            intents = [
                PacketIntent(OUT, PROTO_TCP, FEED_SERVER, flags=TCP_ACK),
                PacketIntent(OUT, PROTO_TCP, FEED_SERVER, body, TCP_ACK, self._out_seq),
            ]
            self._out_seq += len(body)
            self._cycle += 1
            self._responses_left = self.rng.randint(2, 6)
            self._step = 3
            return intents, now + self.RESPONSE_DELAY_MS
        body = self.rng.randbytes(self.rng.randint(600, 1400))
        intent = PacketIntent(IN, PROTO_TCP, FEED_SERVER, body, TCP_ACK, self._in_seq)
        self._in_seq += len(body)
        self._responses_left -= 1
        if self._responses_left > 0:
            return [intent], now + self.RESPONSE_GAP_MS
        self._step = 2
        think = self.params["think_time_ms"] + self.rng.randrange(1000)
        return [intent], now + think


class GameBurst(TrafficModel):
    """Game-download-like bulk: one trigger request, then a cloud-side burst.

    After the handshake the device sends a 16-byte trigger starting with the
    ``GAME`` magic; the CDN answers with segment_count segments of
    segment_bytes each, 5 ms apart, and the model is Done.
    """

    model_id = GAME_BURST
    defaults = {"segment_count": 200, "segment_bytes": 1200}

    SEGMENT_GAP_MS = 5
    BURST_DELAY_MS = 8

    def __init__(self, params: dict, seed: int) -> None:
        super().__init__(params, seed)
        self._step = 0
        self._segments_left = self.params["segment_count"]
        self._in_seq = 0

    def _advance(self, now: int) -> tuple[list[PacketIntent], Optional[int]]:
        if self._step == 0:
            self._step = 1
            return [PacketIntent(OUT, PROTO_TCP, GAME_CDN, flags=TCP_SYN)], now + 1
        if self._step == 1:
            self._step = 2
            return [PacketIntent(IN, PROTO_TCP, GAME_CDN, flags=TCP_SYN | TCP_ACK)], now + 1
        if self._step == 2:
            trigger = GAME_TRIGGER_MAGIC + self.rng.randbytes(12)
            intents = [
                PacketIntent(OUT, PROTO_TCP, GAME_CDN, flags=TCP_ACK),
                PacketIntent(OUT, PROTO_TCP, GAME_CDN, trigger, TCP_ACK),
            ]
            self._step = 3
            return intents, now + self.BURST_DELAY_MS
        body = self.rng.randbytes(self.params["segment_bytes"])
        intent = PacketIntent(IN, PROTO_TCP, GAME_CDN, body, TCP_ACK, self._in_seq)
        self._in_seq += len(body)
        self._segments_left -= 1
        if self._segments_left <= 0:
            return [intent], None
        return [intent], now + self.SEGMENT_GAP_MS


class UnknownApp(TrafficModel):
    """Negative control: random UDP datagrams to :9999 that match no rule."""

    model_id = UNKNOWN_APP
    defaults = {"interval_ms": 200}

    def _advance(self, now: int) -> tuple[list[PacketIntent], Optional[int]]:
        payload = self.rng.randbytes(self.rng.randint(32, 128))
        intent = PacketIntent(OUT, PROTO_UDP, MYSTERY_SINK, payload)
        return [intent], now + self.params["interval_ms"]


_MODELS: dict[str, type[TrafficModel]] = {
    VOIP_CALL: VoipCall,
    SOCIAL_FEED: SocialFeed,
    GAME_BURST: GameBurst,
    UNKNOWN_APP: UnknownApp,
}

MODEL_IDS = tuple(_MODELS)


def spawn(model_id: str, params: dict, seed: int) -> TrafficModel:
    """Instantiate a traffic model in its initial phase."""
    cls = _MODELS.get(model_id)
    if cls is None:
        raise UnknownModel(model_id)
    return cls(params, seed)
