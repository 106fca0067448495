"""Wire codec tests: hand-derived byte vectors, round-trip identity, rejection rules."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotstack.mqtt import (
    ConnAck,
    Connect,
    Disconnect,
    MqttError,
    PingReq,
    PingResp,
    PubAck,
    PubComp,
    Publish,
    PubRec,
    PubRel,
    SubAck,
    Subscribe,
    UnsubAck,
    Unsubscribe,
    decode_packet,
    decode_remaining_length,
    encode_packet,
    encode_remaining_length,
)


def varint_by_long_division(n: int) -> bytes:
    # Independent oracle: repeated division by 128, continuation bit on all
    # but the last byte.
    out = []
    while True:
        digit = n % 128
        n //= 128
        out.append(digit | 0x80 if n else digit)
        if not n:
            return bytes(out)


class TestRemainingLength:
    def test_zero(self):
        assert encode_remaining_length(0) == b"\x00"

    def test_hand_derived_vectors(self):
        assert encode_remaining_length(321) == bytes([0xC1, 0x02])
        assert encode_remaining_length(127) == bytes([0x7F])
        assert encode_remaining_length(128) == bytes([0x80, 0x01])
        assert encode_remaining_length(16383) == bytes([0xFF, 0x7F])
        assert encode_remaining_length(16384) == bytes([0x80, 0x80, 0x01])
        assert encode_remaining_length(268435455) == bytes([0xFF, 0xFF, 0xFF, 0x7F])

    def test_roundtrip_against_division_oracle(self):
        values = list(range(0, 1 << 16))
        rng = random.Random(7)
        values += [rng.randrange(0, 1 << 21) for _ in range(5000)]
        values += [(1 << 21) - 1, 1 << 21, (1 << 28) - 1]
        for n in values:
            enc = encode_remaining_length(n)
            assert enc == varint_by_long_division(n)
            assert decode_remaining_length(enc) == (n, len(enc))

    def test_canonical_shortest(self):
        # Never ends with a continuation bit; boundary values use the minimum
        # number of bytes.
        for n, size in [(0, 1), (127, 1), (128, 2), (16383, 2), (16384, 3), (2097151, 3), (2097152, 4)]:
            enc = encode_remaining_length(n)
            assert len(enc) == size
            assert not enc[-1] & 0x80

    def test_out_of_range(self):
        with pytest.raises(MqttError):
            encode_remaining_length(-1)
        with pytest.raises(MqttError):
            encode_remaining_length(268435456)

    def test_overlong_varint_rejected(self):
        with pytest.raises(MqttError):
            decode_remaining_length(bytes([0x80, 0x80, 0x80, 0x80, 0x01]))

    def test_incomplete_returns_none(self):
        assert decode_remaining_length(bytes([0x80])) is None
        assert decode_remaining_length(b"") is None


class TestPacketVectors:
    def test_pingreq(self):
        assert encode_packet(PingReq()) == bytes([0xC0, 0x00])
        assert decode_packet(bytes([0xC0, 0x00])) == (PingReq(), 2)

    def test_disconnect(self):
        assert encode_packet(Disconnect()) == bytes([0xE0, 0x00])

    def test_pingresp(self):
        assert encode_packet(PingResp()) == bytes([0xD0, 0x00])

    def test_publish_qos1_layout(self):
        p = Publish(topic="t", payload=b"x", qos=1, packet_id=10)
        data = encode_packet(p)
        # type 3 in high nibble, qos 1 -> flags 0b0010; remaining length
        # 2 (topic length prefix) + 1 (topic) + 2 (packet id) + 1 (payload).
        assert data[0] == 0x32
        assert data[1] == 6
        assert data == bytes([0x32, 0x06, 0x00, 0x01, 0x74, 0x00, 0x0A, 0x78])

    def test_incomplete_frame_needs_more(self):
        assert decode_packet(bytes([0xC0])) is None
        full = encode_packet(Publish(topic="abc", payload=b"defgh", qos=0))
        for cut in range(len(full)):
            assert decode_packet(full[:cut]) is None

    def test_forbidden_qos3(self):
        frame = bytes([0x36, 0x04, 0x00, 0x01, 0x74, 0x78])
        with pytest.raises(MqttError):
            decode_packet(frame)

    def test_retain_flag_rejected(self):
        frame = bytes([0x31, 0x04, 0x00, 0x01, 0x74, 0x78])
        with pytest.raises(MqttError):
            decode_packet(frame)

    def test_reserved_types_rejected(self):
        with pytest.raises(MqttError):
            decode_packet(bytes([0x00, 0x00]))
        with pytest.raises(MqttError):
            decode_packet(bytes([0xF0, 0x00]))

    def test_bad_reserved_flags_rejected(self):
        # PUBREL requires flags 0x02; PINGREQ requires 0x00.
        with pytest.raises(MqttError):
            decode_packet(bytes([0x60, 0x02, 0x00, 0x01]))
        with pytest.raises(MqttError):
            decode_packet(bytes([0xC1, 0x00]))

    def test_wildcard_topics_rejected(self):
        for topic in ["a/+/b", "#", "+", "sensors/#"]:
            with pytest.raises(MqttError):
                encode_packet(Publish(topic=topic, qos=0))

    def test_connect_with_will_or_auth_rejected(self):
        def connect_frame(cflags: int) -> bytes:
            body = b"\x00\x04MQTT" + bytes([4, cflags]) + b"\x00\x3c" + b"\x00\x02c1"
            return bytes([0x10, len(body)]) + body

        assert decode_packet(connect_frame(0x02)) is not None
        for cflags in (0x06, 0x82, 0x42, 0x01):
            with pytest.raises(MqttError):
                decode_packet(connect_frame(cflags))

    def test_connect_roundtrip_keeps_fields(self):
        c = Connect(client_id="dev-42", keep_alive=30, clean_session=True)
        decoded, consumed = decode_packet(encode_packet(c))
        assert decoded == c
        assert consumed == len(encode_packet(c))

    def test_payload_cap(self):
        big = b"z" * (256 * 1024 + 1)
        with pytest.raises(MqttError):
            encode_packet(Publish(topic="t", payload=big, qos=0))


def random_packet(rng: random.Random):
    """Uniformly pick a valid packet of any supported kind."""
    topic_chars = "abcdefghijklmnop/0123456789-_"

    def topic():
        return "".join(rng.choice(topic_chars) for _ in range(rng.randint(1, 24)))

    def pid():
        return rng.randint(1, 0xFFFF)

    def payload():
        return rng.randbytes(rng.randint(0, 64))

    kind = rng.randrange(14)
    if kind == 0:
        return Connect(
            client_id="".join(rng.choice("abcxyz0189") for _ in range(rng.randint(0, 16))),
            keep_alive=rng.randint(0, 0xFFFF),
            clean_session=True,
        )
    if kind == 1:
        return ConnAck(return_code=rng.randint(0, 5), session_present=rng.random() < 0.5)
    if kind == 2:
        qos = rng.randint(0, 2)
        return Publish(
            topic=topic(),
            payload=payload(),
            qos=qos,
            packet_id=pid() if qos else None,
            dup=qos > 0 and rng.random() < 0.3,
        )
    if kind == 3:
        return PubAck(packet_id=pid())
    if kind == 4:
        return PubRec(packet_id=pid())
    if kind == 5:
        return PubRel(packet_id=pid())
    if kind == 6:
        return PubComp(packet_id=pid())
    if kind == 7:
        return Subscribe(
            packet_id=pid(),
            topics=tuple((topic(), rng.randint(0, 2)) for _ in range(rng.randint(1, 5))),
        )
    if kind == 8:
        return SubAck(
            packet_id=pid(),
            return_codes=tuple(
                rng.choice([0, 1, 2, 0x80]) for _ in range(rng.randint(1, 5))
            ),
        )
    if kind == 9:
        return Unsubscribe(
            packet_id=pid(), topics=tuple(topic() for _ in range(rng.randint(1, 5)))
        )
    if kind == 10:
        return UnsubAck(packet_id=pid())
    if kind == 11:
        return PingReq()
    if kind == 12:
        return PingResp()
    return Disconnect()


class TestRoundTrip:
    def test_seeded_random_packets(self):
        rng = random.Random(0xBEEF)
        for _ in range(2000):
            p = random_packet(rng)
            data = encode_packet(p)
            assert decode_packet(data) == (p, len(data))

    def test_decode_ignores_trailing_bytes(self):
        p = Publish(topic="a/b", payload=b"123", qos=1, packet_id=7)
        data = encode_packet(p) + b"garbage that is the next frame"
        decoded, consumed = decode_packet(data)
        assert decoded == p
        assert consumed == len(encode_packet(p))

    @settings(max_examples=300, deadline=None)
    @given(
        topic=st.text(
            alphabet=st.characters(
                blacklist_characters="+#", blacklist_categories=("Cs",)
            ),
            min_size=1,
            max_size=40,
        ),
        payload=st.binary(max_size=128),
        qos=st.integers(min_value=0, max_value=2),
        packet_id=st.integers(min_value=1, max_value=0xFFFF),
        dup=st.booleans(),
    )
    def test_publish_roundtrip_property(self, topic, payload, qos, packet_id, dup):
        p = Publish(
            topic=topic,
            payload=payload,
            qos=qos,
            packet_id=packet_id if qos else None,
            dup=dup if qos else False,
        )
        data = encode_packet(p)
        assert decode_packet(data) == (p, len(data))
