import struct

import pytest
from hypothesis import given, settings, strategies as st

from geofaas import wire
from geofaas.geo import WORLD, Circle, GeoPoint, Hexagon
from geofaas.wire import (
    ControlKind, ControlMessage, FrameDecoder, Message, Topic, TopicKind,
    decode, decode_all, encode,
)

names = st.text(st.characters(blacklist_categories=("Cs", "Zs", "Zl", "Zp", "Cc"), blacklist_characters="/"),
                min_size=1, max_size=12)
ids = st.text(min_size=1, max_size=16).filter(lambda s: "\x00" not in s)
points = st.builds(GeoPoint, st.floats(-90, 90, allow_nan=False), st.floats(-180, 180, allow_nan=False))
topics = st.builds(Topic, names, st.sampled_from(list(TopicKind)))
fences = st.one_of(
    st.just(WORLD),
    st.builds(Circle, points.filter(lambda p: abs(p.lat) < 80), st.floats(0.1, 100)),
    st.builds(Hexagon, points.filter(lambda p: abs(p.lat) < 80), st.floats(0.1, 100)),
)
messages = st.builds(
    Message, ids, ids, ids, points, topics, st.binary(max_size=256), st.one_of(st.none(), ids),
)
controls = st.builds(
    ControlMessage, st.sampled_from(list(ControlKind)),
    client_id=st.one_of(st.none(), ids), location=st.one_of(st.none(), points),
    broker_id=st.one_of(st.none(), ids), topic=st.one_of(st.none(), topics),
    geofence=st.one_of(st.none(), fences), subscriber_id=st.one_of(st.none(), ids),
    correlation_id=st.one_of(st.none(), ids), reason=st.one_of(st.none(), st.text(max_size=20)),
)
rpc = st.one_of(
    st.builds(wire.InvokeRequest, ids, names, st.binary(max_size=64), st.floats(0, 1e6)),
    st.builds(wire.InvokeReply, ids, st.sampled_from(list(wire.InvokeStatus)), st.binary(max_size=64), st.text(max_size=20)),
    st.builds(wire.ListFunctions, ids),
    st.builds(wire.FunctionList, ids, st.lists(names, max_size=4).map(tuple)),
)
frames = st.one_of(messages, controls, rpc)


@settings(max_examples=1000, deadline=None)
@given(frames)
def test_roundtrip(frame):
    data = encode(frame)
    assert decode(data) == frame
    # canonical: re-encoding gives the same bytes
    assert encode(decode(data)) == data


@settings(max_examples=200, deadline=None)
@given(st.lists(frames, max_size=6), st.integers(1, 64))
def test_stream_decoder_any_chunking(batch, chunk):
    stream = b"".join(encode(f) for f in batch)
    dec = FrameDecoder()
    out = []
    for i in range(0, len(stream), chunk):
        out.extend(dec.feed(stream[i:i + chunk]))
    assert out == batch
    assert dec.pending == 0
    assert decode_all(stream) == batch


def _msg(**kw):
    base = dict(msg_id="c1-1", correlation_id="c1-1", sender_id="c1",
                sender_location=GeoPoint(52.5, 13.4), topic=Topic("sieve", TopicKind.CALL), payload=b"10000")
    base.update(kw)
    return Message(**base)


def test_truncated_header_and_body():
    data = encode(_msg())
    with pytest.raises(wire.TruncatedFrame, match="^truncated frame"):
        decode(data[:3])
    with pytest.raises(wire.TruncatedFrame):
        decode(data[:-1])
    with pytest.raises(wire.TruncatedFrame):
        decode_all(data + data[:5])


def test_oversize_rejected_before_reading_body():
    header = struct.pack(">I", wire.MAX_FRAME + 1)
    with pytest.raises(wire.OversizeFrame, match="^oversize frame"):
        decode(header)
    with pytest.raises(wire.OversizeFrame):
        FrameDecoder().feed(header)


@pytest.mark.parametrize("body", [
    b"not json",
    b"[]",
    b'{"type": "nope"}',
    b'{"type": "message"}',
    b"\xff\xfe",
])
def test_malformed_bodies(body):
    with pytest.raises(wire.MalformedFrame, match="^malformed body"):
        decode(struct.pack(">I", len(body)) + body)


def test_trailing_bytes_are_malformed():
    with pytest.raises(wire.MalformedFrame):
        decode(encode(_msg()) + b"x")


def test_topic_text_form():
    t = Topic("sieve", TopicKind.CALL_RETRY)
    assert str(t) == "/sieve/call/retry"
    assert Topic.parse("/sieve/call/retry") == t
    assert {str(x) for x in wire.topics_for_function("f")} == {
        "/f/call", "/f/ack", "/f/result", "/f/nack", "/f/call/retry"}
    for bad in ("sieve/call", "/sieve", "/sieve/bogus"):
        with pytest.raises(ValueError):
            Topic.parse(bad)
    with pytest.raises(ValueError):
        Topic("a/b", TopicKind.CALL)


def test_ids_and_correlation_target():
    gen = wire.IdGenerator("client-7")
    first, second = gen.next(), gen.next()
    assert (first, second) == ("client-7-1", "client-7-2")
    assert wire.correlation_target(first) == "client-7"
    assert _msg(correlation_id="c9-41").target_client == "c9"


def test_error_payload_flag():
    assert _msg(payload=wire.ERROR_PREFIX + b"boom").is_error()
    assert not _msg().is_error()
