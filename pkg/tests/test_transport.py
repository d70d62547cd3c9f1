import json
import struct

import pytest
from hypothesis import given, settings, strategies as st

from rafiki_core import messages as m
from rafiki_core import transport as tp
from rafiki_core.errors import CodecError, TransportClosed
from rafiki_core.hyperspace import Trial, warm

TRIAL = Trial(7, {"lr": 0.01, "kernel": "3x3", "n_layers": 4}, warm(3))


@pytest.mark.parametrize("msg", [
    m.request("w1"),
    m.finish("w1"),
    m.report("w1", 0.75, TRIAL),
    m.report("w2", 0.1, Trial(0, {})),
    m.MasterDirective("w1", m.SEND_TRIAL, TRIAL),
    m.MasterDirective("w1", m.K_PUT),
    m.MasterDirective("w1", m.K_STOP),
    m.MasterDirective("w1", m.SHUTDOWN),
])
def test_codec_round_trip(msg):
    assert tp.decode_frame(tp.encode_frame(msg)) == msg


def frame(obj) -> bytes:
    body = json.dumps(obj).encode()
    return struct.pack("<I", len(body)) + body


@pytest.mark.parametrize("obj", [
    {"type": "kRequest", "worker": "w", "extra": 1},
    {"type": "kNope", "worker": "w"},
    {"type": "kRequest", "worker": 3},
    {"type": "kReport", "worker": "w", "p": "high"},
    {"type": "kPut", "worker": "w", "p": 0.5},
    {"type": "kReport", "worker": "w", "p": 0.5, "trial": {"trial_id": "x", "assignment": {}}},
    {"type": "kReport", "worker": "w", "p": 0.5, "trial": {"trial_id": 1, "assignment": {}, "origin": "hot"}},
    [1, 2],
])
def test_codec_rejects_bad_messages(obj):
    with pytest.raises(CodecError):
        tp.decode_frame(frame(obj))


def test_codec_errors_carry_offsets():
    with pytest.raises(CodecError) as exc:
        tp.decode_frame(b"\x01\x00")
    assert exc.value.offset == 2
    with pytest.raises(CodecError) as exc:
        tp.decode_frame(struct.pack("<I", 5) + b'{"a":')
    assert exc.value.offset >= 4


def test_frame_decoder_reassembles_split_stream():
    msgs = [m.report("w", i / 10, TRIAL) for i in range(10)]
    stream = b"".join(tp.encode_frame(x) for x in msgs)
    dec = tp.FrameDecoder()
    out = []
    for i in range(0, len(stream), 7):
        out += dec.feed(stream[i:i + 7])
    assert out == msgs


def test_oversized_frame_is_rejected():
    with pytest.raises(CodecError):
        tp.FrameDecoder().feed(struct.pack("<I", tp.MAX_FRAME + 1))


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_fuzz_random_bytes_never_crash(data):
    try:
        tp.decode_frame(data)
    except CodecError:
        pass
    try:
        tp.FrameDecoder().feed(data)
    except CodecError:
        pass


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=120))
def test_fuzz_framed_payloads(body):
    try:
        msg = tp.decode_frame(struct.pack("<I", len(body)) + body)
    except CodecError:
        return
    assert isinstance(msg, (m.WireMessage, m.MasterDirective))


# -- shared conformance suite -------------------------------------------------------


class MemoryRig:
    def __init__(self):
        self.hub = tp.MemoryHub()

    def connect(self, name):
        return self.hub.connect(name)

    def master_recv(self):
        return self.hub.recv()

    def worker_recv(self, ep):
        return ep.recv()

    def close(self):
        self.hub.close()


class SocketRig:
    def __init__(self):
        self.hub = tp.SocketHub()
        self.eps = []

    def connect(self, name):
        ep = tp.SocketEndpoint(self.hub.address, name)
        self.eps.append(ep)
        return ep

    def master_recv(self):
        return self.hub.recv(timeout=5.0)

    def worker_recv(self, ep):
        return ep.recv(timeout=5.0)

    def close(self):
        for ep in self.eps:
            ep.close()
        self.hub.close()


@pytest.fixture(params=["memory", "socket"])
def rig(request):
    r = MemoryRig() if request.param == "memory" else SocketRig()
    yield r
    r.close()


def test_send_then_recv(rig):
    ep = rig.connect("w1")
    ep.send(m.request("w1"))
    assert rig.master_recv() == m.request("w1")
    d = m.MasterDirective("w1", m.SEND_TRIAL, TRIAL)
    rig.hub.send("w1", d)
    assert rig.worker_recv(ep) == d


def test_per_worker_order_with_interleaving(rig):
    a, b = rig.connect("a"), rig.connect("b")
    for i in range(50):
        a.send(m.report("a", i, TRIAL))
        b.send(m.report("b", i, TRIAL))
    got = {"a": [], "b": []}
    for _ in range(100):
        msg = rig.master_recv()
        got[msg.worker].append(msg.p)
    assert got["a"] == list(range(50)) and got["b"] == list(range(50))


def test_loopback_ten_thousand(rig):
    ep = rig.connect("w")
    n = 10_000
    for i in range(n):
        ep.send(m.report("w", float(i), TRIAL))
    seq = [rig.master_recv().p for _ in range(n)]
    assert seq == [float(i) for i in range(n)]
    for i in range(n):
        rig.hub.send("w", m.MasterDirective("w", m.K_PUT if i % 2 else m.K_STOP))
    kinds = [rig.worker_recv(ep).kind for _ in range(n)]
    assert kinds == [m.K_PUT if i % 2 else m.K_STOP for i in range(n)]


def test_close_is_observable(rig):
    ep = rig.connect("w")
    ep.send(m.request("w"))
    rig.master_recv()
    ep.close()
    with pytest.raises(TransportClosed):
        for _ in range(3):
            rig.master_recv()
    with pytest.raises(TransportClosed):
        ep.send(m.request("w"))


def test_send_to_unknown_worker(rig):
    with pytest.raises(TransportClosed):
        rig.hub.send("ghost", m.MasterDirective("ghost", m.K_PUT))
