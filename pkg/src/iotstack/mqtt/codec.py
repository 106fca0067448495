"""MQTT 3.1.1 subset codec: fixed-header framing, varint lengths, packet classes.

Exact-match topics only; retained messages, wills, wildcards and auth are
rejected at decode time. Encoding and decoding are pure functions over bytes;
``decode_packet`` never consumes a partial frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

MAX_REMAINING_LENGTH = 268_435_455
MAX_PAYLOAD = 256 * 1024
# Frames larger than payload cap + topic/header overhead are rejected outright
# so a garbage length prefix cannot stall a connection waiting for input.
MAX_FRAME_BODY = MAX_PAYLOAD + 64 * 1024

PROTOCOL_NAME = "MQTT"
PROTOCOL_LEVEL = 4


class MqttError(Exception):
    """Protocol violation; the connection carrying the bytes must be closed."""


class PacketType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    UNSUBSCRIBE = 10
    UNSUBACK = 11
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


def validate_topic(topic: str) -> None:
    """Exact-match topic names: non-empty UTF-8, no '+' or '#', <= 65535 bytes."""
    if not topic:
        raise MqttError("empty topic name")
    if "+" in topic or "#" in topic:
        raise MqttError(f"wildcard character in topic {topic!r}")
    if len(topic.encode("utf-8")) > 0xFFFF:
        raise MqttError("topic name longer than 65535 bytes")


def encode_remaining_length(n: int) -> bytes:
    if not 0 <= n <= MAX_REMAINING_LENGTH:
        raise MqttError(f"remaining length {n} out of range")
    out = bytearray()
    while True:
        digit = n % 128
        n //= 128
        if n:
            digit |= 0x80
        out.append(digit)
        if not n:
            return bytes(out)


def decode_remaining_length(buf: bytes, offset: int = 0) -> tuple[int, int] | None:
    """Decode the varint at ``buf[offset:]``.

    Returns (value, bytes consumed), or None if the buffer ends mid-varint.
    """
    value = 0
    multiplier = 1
    for i in range(4):
        if offset + i >= len(buf):
            return None
        byte = buf[offset + i]
        value += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            return value, i + 1
        multiplier *= 128
    raise MqttError("remaining length varint longer than 4 bytes")


@dataclass(frozen=True)
class Packet:
    """Base for decoded control packets; concrete kinds are subclasses."""

    @property
    def kind(self) -> PacketType:
        return _PACKET_TYPES[type(self)]


@dataclass(frozen=True)
class Connect(Packet):
    client_id: str
    keep_alive: int = 60
    clean_session: bool = True
    protocol_level: int = PROTOCOL_LEVEL


@dataclass(frozen=True)
class ConnAck(Packet):
    return_code: int = 0
    session_present: bool = False


@dataclass(frozen=True)
class Publish(Packet):
    topic: str
    payload: bytes = b""
    qos: int = 0
    packet_id: int | None = None
    dup: bool = False


@dataclass(frozen=True)
class PubAck(Packet):
    packet_id: int


@dataclass(frozen=True)
class PubRec(Packet):
    packet_id: int


@dataclass(frozen=True)
class PubRel(Packet):
    packet_id: int


@dataclass(frozen=True)
class PubComp(Packet):
    packet_id: int


@dataclass(frozen=True)
class Subscribe(Packet):
    packet_id: int
    topics: tuple[tuple[str, int], ...] = field(default=())


@dataclass(frozen=True)
class SubAck(Packet):
    packet_id: int
    return_codes: tuple[int, ...] = field(default=())


@dataclass(frozen=True)
class Unsubscribe(Packet):
    packet_id: int
    topics: tuple[str, ...] = field(default=())


@dataclass(frozen=True)
class UnsubAck(Packet):
    packet_id: int


@dataclass(frozen=True)
class PingReq(Packet):
    pass


@dataclass(frozen=True)
class PingResp(Packet):
    pass


@dataclass(frozen=True)
class Disconnect(Packet):
    pass


_PACKET_TYPES: dict[type, PacketType] = {
    Connect: PacketType.CONNECT,
    ConnAck: PacketType.CONNACK,
    Publish: PacketType.PUBLISH,
    PubAck: PacketType.PUBACK,
    PubRec: PacketType.PUBREC,
    PubRel: PacketType.PUBREL,
    PubComp: PacketType.PUBCOMP,
    Subscribe: PacketType.SUBSCRIBE,
    SubAck: PacketType.SUBACK,
    Unsubscribe: PacketType.UNSUBSCRIBE,
    UnsubAck: PacketType.UNSUBACK,
    PingReq: PacketType.PINGREQ,
    PingResp: PacketType.PINGRESP,
    Disconnect: PacketType.DISCONNECT,
}

# Fixed-header flag nibble required for each non-PUBLISH type (MQTT 3.1.1
# reserves these bits; a mismatch is a protocol error).
_REQUIRED_FLAGS = {
    PacketType.CONNECT: 0,
    PacketType.CONNACK: 0,
    PacketType.PUBACK: 0,
    PacketType.PUBREC: 0,
    PacketType.PUBREL: 2,
    PacketType.PUBCOMP: 0,
    PacketType.SUBSCRIBE: 2,
    PacketType.SUBACK: 0,
    PacketType.UNSUBSCRIBE: 2,
    PacketType.UNSUBACK: 0,
    PacketType.PINGREQ: 0,
    PacketType.PINGRESP: 0,
    PacketType.DISCONNECT: 0,
}

# CONNECT flag bits
_FLAG_CLEAN_SESSION = 0x02
_FLAG_WILL = 0x04
_FLAG_PASSWORD = 0x40
_FLAG_USERNAME = 0x80


def _encode_string(s: str) -> bytes:
    data = s.encode("utf-8")
    if len(data) > 0xFFFF:
        raise MqttError("string longer than 65535 bytes")
    return struct.pack(">H", len(data)) + data


def _read_u16(body: bytes, off: int) -> tuple[int, int]:
    if off + 2 > len(body):
        raise MqttError("truncated 16-bit field")
    return struct.unpack_from(">H", body, off)[0], off + 2


def _read_string(body: bytes, off: int) -> tuple[str, int]:
    n, off = _read_u16(body, off)
    if off + n > len(body):
        raise MqttError("truncated string field")
    try:
        return body[off : off + n].decode("utf-8"), off + n
    except UnicodeDecodeError as exc:
        raise MqttError(f"invalid UTF-8 in string: {exc}") from None


def _check_packet_id(pid: int) -> int:
    if not 1 <= pid <= 0xFFFF:
        raise MqttError(f"packet id {pid} out of range 1..65535")
    return pid


def encode_packet(p: Packet) -> bytes:
    kind = p.kind
    flags = 0
    body = b""

    if isinstance(p, Connect):
        cflags = _FLAG_CLEAN_SESSION if p.clean_session else 0
        body = (
            _encode_string(PROTOCOL_NAME)
            + bytes([p.protocol_level, cflags])
            + struct.pack(">H", p.keep_alive)
            + _encode_string(p.client_id)
        )
    elif isinstance(p, ConnAck):
        body = bytes([1 if p.session_present else 0, p.return_code])
    elif isinstance(p, Publish):
        validate_topic(p.topic)
        if p.qos not in (0, 1, 2):
            raise MqttError(f"invalid qos {p.qos}")
        if len(p.payload) > MAX_PAYLOAD:
            raise MqttError(f"payload exceeds {MAX_PAYLOAD} bytes")
        if (p.packet_id is None) == (p.qos > 0):
            raise MqttError("packet id required iff qos > 0")
        flags = (0x08 if p.dup else 0) | (p.qos << 1)
        body = _encode_string(p.topic)
        if p.qos > 0:
            body += struct.pack(">H", _check_packet_id(p.packet_id))
        body += p.payload
    elif isinstance(p, (PubAck, PubRec, PubRel, PubComp, UnsubAck)):
        body = struct.pack(">H", _check_packet_id(p.packet_id))
    elif isinstance(p, Subscribe):
        if not p.topics:
            raise MqttError("SUBSCRIBE with no topics")
        body = struct.pack(">H", _check_packet_id(p.packet_id))
        for topic, qos in p.topics:
            validate_topic(topic)
            if qos not in (0, 1, 2):
                raise MqttError(f"invalid requested qos {qos}")
            body += _encode_string(topic) + bytes([qos])
    elif isinstance(p, SubAck):
        if not p.return_codes:
            raise MqttError("SUBACK with no return codes")
        body = struct.pack(">H", _check_packet_id(p.packet_id)) + bytes(
            p.return_codes
        )
    elif isinstance(p, Unsubscribe):
        if not p.topics:
            raise MqttError("UNSUBSCRIBE with no topics")
        body = struct.pack(">H", _check_packet_id(p.packet_id))
        for topic in p.topics:
            validate_topic(topic)
            body += _encode_string(topic)
    elif isinstance(p, (PingReq, PingResp, Disconnect)):
        body = b""
    else:
        raise MqttError(f"cannot encode {type(p).__name__}")

    if kind != PacketType.PUBLISH:
        flags = _REQUIRED_FLAGS[kind]
    head = bytes([(kind << 4) | flags])
    return head + encode_remaining_length(len(body)) + body


def decode_packet(buf: bytes) -> tuple[Packet, int] | None:
    """Decode the first complete frame in ``buf``.

    Returns (packet, bytes consumed), or None when more bytes are needed.
    Raises MqttError on malformed input; the caller must close the connection.
    """
    if len(buf) < 2:
        return None
    head = buf[0]
    type_val = head >> 4
    flags = head & 0x0F
    if type_val == 0 or type_val == 15:
        raise MqttError(f"reserved packet type {type_val}")
    kind = PacketType(type_val)

    rl = decode_remaining_length(buf, 1)
    if rl is None:
        return None
    body_len, rl_bytes = rl
    if body_len > MAX_FRAME_BODY:
        raise MqttError(f"frame body {body_len} exceeds maximum")
    consumed = 1 + rl_bytes + body_len
    if len(buf) < consumed:
        return None
    body = bytes(buf[1 + rl_bytes : consumed])

    if kind != PacketType.PUBLISH and flags != _REQUIRED_FLAGS[kind]:
        raise MqttError(f"bad fixed-header flags {flags:#x} for {kind.name}")

    packet = _decode_body(kind, flags, body)
    return packet, consumed


def _decode_body(kind: PacketType, flags: int, body: bytes) -> Packet:
    if kind == PacketType.PUBLISH:
        if flags & 0x01:
            raise MqttError("retain flag not supported")
        qos = (flags >> 1) & 0x03
        if qos == 3:
            raise MqttError("qos 3 is forbidden")
        dup = bool(flags & 0x08)
        topic, off = _read_string(body, 0)
        validate_topic(topic)
        packet_id = None
        if qos > 0:
            packet_id, off = _read_u16(body, off)
            _check_packet_id(packet_id)
        payload = body[off:]
        if len(payload) > MAX_PAYLOAD:
            raise MqttError(f"payload exceeds {MAX_PAYLOAD} bytes")
        return Publish(topic=topic, payload=payload, qos=qos, packet_id=packet_id, dup=dup)

    if kind == PacketType.CONNECT:
        name, off = _read_string(body, 0)
        if name != PROTOCOL_NAME:
            raise MqttError(f"unknown protocol name {name!r}")
        if off + 4 > len(body):
            raise MqttError("truncated CONNECT header")
        level = body[off]
        cflags = body[off + 1]
        keep_alive = struct.unpack_from(">H", body, off + 2)[0]
        off += 4
        if cflags & 0x01:
            raise MqttError("CONNECT reserved flag set")
        if cflags & _FLAG_WILL:
            raise MqttError("will messages not supported")
        if cflags & (_FLAG_USERNAME | _FLAG_PASSWORD):
            raise MqttError("authentication not supported")
        client_id, off = _read_string(body, off)
        if off != len(body):
            raise MqttError("trailing bytes in CONNECT")
        return Connect(
            client_id=client_id,
            keep_alive=keep_alive,
            clean_session=bool(cflags & _FLAG_CLEAN_SESSION),
            protocol_level=level,
        )

    if kind == PacketType.CONNACK:
        if len(body) != 2:
            raise MqttError("CONNACK body must be 2 bytes")
        return ConnAck(return_code=body[1], session_present=bool(body[0] & 0x01))

    if kind in (
        PacketType.PUBACK,
        PacketType.PUBREC,
        PacketType.PUBREL,
        PacketType.PUBCOMP,
        PacketType.UNSUBACK,
    ):
        if len(body) != 2:
            raise MqttError(f"{kind.name} body must be 2 bytes")
        pid = _check_packet_id(struct.unpack(">H", body)[0])
        cls = {
            PacketType.PUBACK: PubAck,
            PacketType.PUBREC: PubRec,
            PacketType.PUBREL: PubRel,
            PacketType.PUBCOMP: PubComp,
            PacketType.UNSUBACK: UnsubAck,
        }[kind]
        return cls(packet_id=pid)

    if kind == PacketType.SUBSCRIBE:
        pid, off = _read_u16(body, 0)
        _check_packet_id(pid)
        topics = []
        while off < len(body):
            topic, off = _read_string(body, off)
            validate_topic(topic)
            if off + 1 > len(body):
                raise MqttError("SUBSCRIBE missing qos byte")
            qos = body[off]
            off += 1
            if qos > 2:
                raise MqttError(f"invalid requested qos {qos}")
            topics.append((topic, qos))
        if not topics:
            raise MqttError("SUBSCRIBE with no topics")
        return Subscribe(packet_id=pid, topics=tuple(topics))

    if kind == PacketType.SUBACK:
        pid, off = _read_u16(body, 0)
        _check_packet_id(pid)
        codes = tuple(body[off:])
        if not codes:
            raise MqttError("SUBACK with no return codes")
        for code in codes:
            if code not in (0, 1, 2, 0x80):
                raise MqttError(f"invalid SUBACK return code {code:#x}")
        return SubAck(packet_id=pid, return_codes=codes)

    if kind == PacketType.UNSUBSCRIBE:
        pid, off = _read_u16(body, 0)
        _check_packet_id(pid)
        topics = []
        while off < len(body):
            topic, off = _read_string(body, off)
            validate_topic(topic)
            topics.append(topic)
        if not topics:
            raise MqttError("UNSUBSCRIBE with no topics")
        return Unsubscribe(packet_id=pid, topics=tuple(topics))

    if kind in (PacketType.PINGREQ, PacketType.PINGRESP, PacketType.DISCONNECT):
        if body:
            raise MqttError(f"{kind.name} must have an empty body")
        return {
            PacketType.PINGREQ: PingReq,
            PacketType.PINGRESP: PingResp,
            PacketType.DISCONNECT: Disconnect,
        }[kind]()

    raise MqttError(f"unhandled packet type {kind}")
