import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncsmw.message import Message, Reliability
from ncsmw.services.clock import ClockModel, PingSample, record_ping_sample, translate_timestamp
from ncsmw.services.framing import (
    FrameError,
    FrameReader,
    MAX_FRAME_BYTES,
    decode_frame,
    encode_frame,
    pack_frame,
    unpack_frame,
)
from ncsmw.services.notifier import NotificationSchedule, notifier_due
from ncsmw.services.registry import ComponentAddress, ProfileEntry, ProfileNotFound, ProfileRegistry, RegistryError, RemoteBinding
from ncsmw.services.transport import ChannelModel, SimLink, connect_endpoints
from ncsmw.sim import SimClock
from ncsmw.world import SimWorld


# -- clock model ------------------------------------------------------------------

def test_identical_clocks_give_zero_offset():
    assert PingSample(100, 100, 100, 100).offset == 0


def test_offset_example():
    assert PingSample(100, 160, 165, 110).offset == 57.5


def test_symmetric_delay_cancels():
    s = PingSample(1000, 1000 + 5 + 50, 1000 + 5 + 50, 1000 + 10)
    assert s.offset == 50.0


def test_single_sample_model_has_zero_skew():
    cm = record_ping_sample(ClockModel("b", window=1), PingSample(0, 55, 55, 10))
    assert cm.offset_ms == 50 and cm.skew_ppm == 0


def test_translate_identity_offset_and_skew():
    cm = ClockModel("b")
    assert translate_timestamp(123.0, cm) == 123.0  # empty model passes through
    cm.samples.append(PingSample(0, 0, 0, 0))
    assert translate_timestamp(500, cm) == 500
    cm.offset_ms = 50.0
    assert translate_timestamp(500, cm) == 450
    cm.skew_ppm = 100.0
    ts = 1_000_000 + 50.0
    assert translate_timestamp(ts, cm) == pytest.approx(ts - 50 - 100)


def test_skew_is_recovered_from_a_drifting_peer():
    cm = ClockModel("b")
    for i in range(16):
        t1 = i * 1000.0
        peer = lambda t: 50 + t * (1 + 100e-6)
        record_ping_sample(cm, PingSample(t1, peer(t1 + 5), peer(t1 + 5), t1 + 10))
    assert cm.skew_ppm == pytest.approx(100.0, rel=1e-6)


# -- notifier ---------------------------------------------------------------------

def test_notifier_activations():
    s = NotificationSchedule("ctrl", 15)
    assert notifier_due(s, 14) == []
    assert [m.timestamp_ms for m in notifier_due(s, 45)] == [15, 30, 45]


def test_stalled_notifier_catches_up_with_nominal_timestamps():
    s = NotificationSchedule("ctrl", 15)
    out = notifier_due(s, 100)
    assert len(out) == 100 // 15 == 6
    assert [m.timestamp_ms for m in out] == [15, 30, 45, 60, 75, 90]
    assert [m.content["activation"] for m in out] == [1, 2, 3, 4, 5, 6]


def test_notifier_count_limit():
    s = NotificationSchedule("ctrl", 10, count=2)
    assert len(notifier_due(s, 1000)) == 2 and s.exhausted


# -- framing ----------------------------------------------------------------------

def test_frame_length_prefix():
    m = Message("Ping", "NetworkTime@nodeB")
    data = encode_frame(m, 9)
    assert int.from_bytes(data[:4], "big") == len(data) - 4
    assert decode_frame(data) == m


def test_frame_errors():
    data = encode_frame(Message("Ping", "p"), 1)
    with pytest.raises(FrameError):
        unpack_frame(data[:-1])
    with pytest.raises(FrameError):
        unpack_frame(data + b"x")
    with pytest.raises(FrameError):
        unpack_frame(pack_frame(b"\xff\xfe", 0, 1))


def test_frame_reader_reassembles_chunks():
    frames = [encode_frame(Message("T", "p", {"i": i}), i) for i in range(5)]
    stream = b"".join(frames)
    r = FrameReader()
    got = []
    for i in range(0, len(stream), 7):
        got += r.feed(stream[i:i + 7])
    assert got == frames


def test_link_drops_oversize_frames():
    clock = SimClock()
    got = []
    link = SimLink(clock, ChannelModel(1, 0, 0), random.Random(0), got.append)
    link.send(b"\0" * (MAX_FRAME_BYTES + 1))
    clock.run()
    assert got == [] and link.frames_dropped == 1


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.sampled_from("abc"), st.integers()), st.integers(0, 2**56 - 1), st.sampled_from(list(Reliability)))
def test_decode_encode_identity(content, seq, rel):
    m = Message("T", "p@n", content, timestamp_ms=3, reliability=rel)
    data = encode_frame(m, seq)
    f = unpack_frame(data)
    assert f.message == m
    # best-effort frames always carry sequence 0
    assert f.sequence == (seq if m.reliable else 0)
    assert encode_frame(f.message, f.sequence) == data


# -- reliable transport -----------------------------------------------------------

def run_reliable(loss, n, seed, dup=0.0):
    clock = SimClock()
    got = []
    a, b, ab, ba = connect_endpoints(clock, ChannelModel(2, 3, loss, dup), random.Random(seed), lambda m: None, got.append)
    for i in range(n):
        a.send(Message("D", "p", {"i": i}, reliability=Reliability.RELIABLE))
    clock.run()
    return got, a, ab


def test_reliable_delivery_exactly_once_under_loss():
    got, a, link = run_reliable(0.3, 300, 1, dup=0.1)
    assert [m.content["i"] for m in got] == list(range(300))
    assert a.in_flight == 0 and a.retransmissions > 0 and link.frames_dropped > 0


def test_best_effort_drops_but_never_duplicates():
    clock = SimClock()
    got = []
    a, _, _, _ = connect_endpoints(clock, ChannelModel(1, 5, 0.3, 0.3), random.Random(3), lambda m: None, got.append)
    for i in range(200):
        a.send(Message("D", "p", {"i": i}))
    clock.run()
    ids = [m.content["i"] for m in got]
    assert len(ids) == len(set(ids)) < 200


def test_retransmission_backoff():
    from ncsmw.services.transport import LinkEndpoint

    clock = SimClock()
    sent = []
    ep = LinkEndpoint(clock, lambda d: sent.append(clock.now_ms()), lambda m: None)
    ep.send(Message("D", "p", reliability=Reliability.RELIABLE))
    clock.run_until(3000)
    assert sent[:6] == [0, 50, 150, 350, 750, 1550]
    assert sent[6] == 2550  # capped at 1 s


# -- registry ---------------------------------------------------------------------

def test_registry_lifecycle():
    reg = ProfileRegistry("n")
    addr = ComponentAddress("n", 1)
    reg.register(ProfileEntry("c", addr))
    assert reg.resolve("c") == addr
    with pytest.raises(RegistryError):
        reg.register(ProfileEntry("c", addr))
    reg.rebind("c", RemoteBinding("m"))
    assert reg.resolve("c") == RemoteBinding("m")
    reg.rebind("c", addr)
    assert reg.resolve("c") == addr
    with pytest.raises(ProfileNotFound):
        reg.resolve("zzz")


# -- messenger across nodes -----------------------------------------------------

def test_remote_message_is_one_frame_and_timestamp_translated():
    from ncsmw.component import Component

    class Sink(Component):
        def __init__(self):
            self.got = []

        def process_message(self, m):
            self.got.append(m)
            return []

    w = SimWorld(0)
    a = w.add_node("a")
    w.add_node("b", offset_ms=50.0)
    w.connect("a", "b", ChannelModel(5, 0, 0))
    sink = Sink()
    w.deploy("b", "sink", sink)
    w.nodes["b"].services["messenger"].clocks["a"] = cm = ClockModel("a")
    cm.samples.append(PingSample(0, 0, 0, 0))
    cm.offset_ms = -50.0
    a.submit_output(Message("Hi", "sink", {}, timestamp_ms=100))
    w.run_until(50)
    assert w.links[("a", "b")].frames_sent == 1
    assert sink.got[0].timestamp_ms == 150
