import pytest

from fleetsim.appmodels import (GAME_TRIGGER_MAGIC, IN, OUT, ModelExhausted,
                                UnknownModel, VOIP_PROBE_LEN,
                                VOIP_PROBE_MARKER, VOIP_PROBE_OFFSET,
                                derive_seed, spawn)
from fleetsim.netfabric import PROTO_TCP, PROTO_UDP, TCP_ACK, TCP_SYN


def run_trace(model, start=0, limit_ms=10**9, max_wakes=10**6):
    """Drive a model at its requested wake times, collecting (t, intent)."""
    events = []
    t = start
    for _ in range(max_wakes):
        intents, nxt = model.next_events(t)
        events.extend((t, intent) for intent in intents)
        if nxt is None or nxt > limit_ms:
            return events
        t = nxt
    raise AssertionError("model did not settle")


def test_unknown_model_id_rejected():
    with pytest.raises(UnknownModel):
        spawn("tiktok", {}, 1)


def test_unknown_param_rejected():
    with pytest.raises(ValueError):
        spawn("voip_call", {"bitrate": 9000}, 1)


def test_equal_seed_gives_byte_identical_traces():
    a = run_trace(spawn("voip_call", {}, 42))
    b = run_trace(spawn("voip_call", {}, 42))
    assert a == b
    c = run_trace(spawn("voip_call", {}, 43))
    assert a != c


def test_exhausted_model_raises():
    model = spawn("game_burst", {"segment_count": 1}, 1)
    run_trace(model)
    assert model.done
    with pytest.raises(ModelExhausted):
        model.next_events(10**7)


# -- voip_call -------------------------------------------------------------


def test_voip_probes_shape_and_timing():
    trace = run_trace(spawn("voip_call", {"call_duration_ms": 1000}, 7), start=500)
    probes = trace[:3]
    assert [t for t, _ in probes] == [500, 600, 700]
    for _, intent in probes:
        assert intent.direction == OUT
        assert intent.proto == PROTO_UDP
        assert intent.remote.port == 3478
        assert len(intent.payload) == VOIP_PROBE_LEN
        assert intent.payload[VOIP_PROBE_OFFSET] == VOIP_PROBE_MARKER


def test_voip_media_rate_is_exact():
    # arithmetic on defaults: 50 pkt/s x 160 B x 8 = 64000 bit/s per direction
    trace = run_trace(spawn("voip_call", {"call_duration_ms": 3000}, 7), start=0)
    media = [(t, i) for t, i in trace if len(i.payload) == 160]
    out_times = sorted(t for t, i in media if i.direction == OUT)
    in_times = sorted(t for t, i in media if i.direction == IN)
    assert out_times == in_times
    gaps = {b - a for a, b in zip(out_times, out_times[1:])}
    assert gaps == {20}
    window = [t for t in out_times if out_times[0] <= t < out_times[0] + 1000]
    assert len(window) == 50
    assert sum(160 for _ in window) * 8 == 64_000


def test_voip_phase_order_and_completion():
    trace = run_trace(spawn("voip_call", {"call_duration_ms": 1000}, 9), start=0)
    last_probe_t = trace[2][0]
    first_media_t = trace[3][0]
    assert first_media_t > last_probe_t
    media_ticks = 1000 // 20
    assert len(trace) == 3 + 2 * media_ticks  # both directions per tick


# -- social_feed ------------------------------------------------------------


def test_social_first_packet_is_syn_to_443():
    model = spawn("social_feed", {}, 5)
    intents, _ = model.next_events(0)
    assert len(intents) == 1
    intent = intents[0]
    assert intent.direction == OUT
    assert intent.proto == PROTO_TCP
    assert intent.flags == TCP_SYN
    assert intent.remote.port == 443
    assert intent.payload == b""


def test_social_request_carries_host_and_follows_handshake():
    trace = run_trace(spawn("social_feed", {}, 5), limit_ms=2000)
    requests = [(t, i) for t, i in trace if b"Host: " in i.payload]
    assert requests
    t_req, request = requests[0]
    assert b"Host: m.social.test" in request.payload
    handshake = trace[:3]
    assert [i.flags for _, i in handshake] == [TCP_SYN, TCP_SYN | TCP_ACK, TCP_ACK]
    assert all(t <= t_req for t, _ in handshake)
    assert {i.direction for _, i in trace[1:2]} == {IN}


def test_social_host_param_overrides_literal():
    trace = run_trace(spawn("social_feed", {"host": "feed.example"}, 5),
                      limit_ms=2000)
    request = next(i for _, i in trace if i.payload)
    assert b"Host: feed.example" in request.payload
    assert b"m.social.test" not in request.payload


def test_social_response_count_in_range_and_seed_dependent():
    def cycle_ks(seed):
        trace = run_trace(spawn("social_feed", {}, seed), limit_ms=30_000)
        ks = []
        k = 0
        for _, intent in trace:
            if intent.direction == IN and intent.payload:
                k += 1
            elif intent.payload and b"GET /feed" in intent.payload and k:
                ks.append(k)
                k = 0
        return ks

    ks = cycle_ks(3)
    assert ks and all(2 <= k <= 6 for k in ks)
    assert any(cycle_ks(3) != cycle_ks(s) for s in (4, 5, 6))


# -- game_burst -------------------------------------------------------------


def test_game_trigger_then_cloud_burst():
    trace = run_trace(spawn("game_burst", {}, 11))
    trigger = next(i for _, i in trace if i.direction == OUT and i.payload)
    assert trigger.payload.startswith(GAME_TRIGGER_MAGIC)
    assert trigger.remote.port == 8080
    segments = [i for _, i in trace if i.direction == IN and i.payload]
    assert len(segments) == 200
    assert all(len(s.payload) == 1200 for s in segments)


def test_game_burst_param_overrides():
    trace = run_trace(spawn("game_burst", {"segment_count": 5, "segment_bytes": 64}, 1))
    segments = [i for _, i in trace if i.direction == IN and i.payload]
    assert len(segments) == 5 and all(len(s.payload) == 64 for s in segments)


# -- unknown_app -------------------------------------------------------------


def test_unknown_app_targets_9999_with_seeded_payloads():
    model = spawn("unknown_app", {}, 21)
    trace = run_trace(model, limit_ms=2000)
    assert all(i.proto == PROTO_UDP and i.remote.port == 9999 for _, i in trace)
    assert all(32 <= len(i.payload) <= 128 for _, i in trace)
    other = run_trace(spawn("unknown_app", {}, 22), limit_ms=2000)
    assert [i.payload for _, i in trace] != [i.payload for _, i in other]


def test_emitted_counters_track_payload_bytes():
    model = spawn("voip_call", {"call_duration_ms": 200}, 3)
    trace = run_trace(model)
    out_bytes = sum(len(i.payload) for _, i in trace if i.direction == OUT)
    in_bytes = sum(len(i.payload) for _, i in trace if i.direction == IN)
    assert (model.emitted_out_bytes, model.emitted_in_bytes) == (out_bytes, in_bytes)


def test_seed_derivation_is_stable_and_spread():
    a = derive_seed(1, 2, "com.skype.test")
    assert a == derive_seed(1, 2, "com.skype.test")
    others = {derive_seed(1, 3, "com.skype.test"), derive_seed(2, 2, "com.skype.test"),
              derive_seed(1, 2, "com.twitter.android")}
    assert a not in others and len(others) == 3
    assert 0 <= a < 2**64
