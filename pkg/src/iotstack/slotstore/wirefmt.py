"""Store wire protocol: length-prefixed binary frames.

Frame: u32 big-endian length of (opcode + body), u8 opcode, body. Strings and
keys are u16-length-prefixed; values and payloads u32-length-prefixed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum


class Opcode(IntEnum):
    # requests
    SET = 1
    GET = 2
    DEL = 3
    SUBSCRIBE = 4
    UNSUBSCRIBE = 5
    PUBLISH = 6
    FORWARD = 7
    LOGSHIP = 8
    PING = 9
    SLOTS = 10
    STATS = 11
    FAILOVER = 12
    # responses and pushes
    OK = 64
    VALUE = 65
    NIL = 66
    MOVED = 67
    ERROR = 68
    PONG = 69
    DELIVER = 70


RESPONSE_OPCODES = frozenset(
    {Opcode.OK, Opcode.VALUE, Opcode.NIL, Opcode.MOVED, Opcode.ERROR, Opcode.PONG}
)

MAX_FRAME = 4 * 1024 * 1024


class WireError(Exception):
    pass


@dataclass(frozen=True)
class Frame:
    opcode: Opcode
    body: bytes = b""


def encode_frame(opcode: Opcode, body: bytes = b"") -> bytes:
    if 1 + len(body) > MAX_FRAME:
        raise WireError("frame too large")
    return struct.pack(">I", 1 + len(body)) + bytes([opcode]) + body


def decode_frame(buf: bytes | bytearray) -> tuple[Frame, int] | None:
    """First complete frame in ``buf`` -> (frame, consumed), or None."""
    if len(buf) < 4:
        return None
    (length,) = struct.unpack_from(">I", buf, 0)
    if length < 1 or length > MAX_FRAME:
        raise WireError(f"bad frame length {length}")
    if len(buf) < 4 + length:
        return None
    try:
        opcode = Opcode(buf[4])
    except ValueError:
        raise WireError(f"unknown opcode {buf[4]}") from None
    return Frame(opcode, bytes(buf[5 : 4 + length])), 4 + length


def _pack_short(data: bytes) -> bytes:
    if len(data) > 0xFFFF:
        raise WireError("short field exceeds 65535 bytes")
    return struct.pack(">H", len(data)) + data


def _pack_long(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def _read_short(body: bytes, off: int) -> tuple[bytes, int]:
    (n,) = struct.unpack_from(">H", body, off)
    off += 2
    return body[off : off + n], off + n


def _read_long(body: bytes, off: int) -> tuple[bytes, int]:
    (n,) = struct.unpack_from(">I", body, off)
    off += 4
    return body[off : off + n], off + n


# -- request bodies ----------------------------------------------------------

def set_body(key: bytes, value: bytes) -> bytes:
    return _pack_short(key) + _pack_long(value)


def parse_set(body: bytes) -> tuple[bytes, bytes]:
    key, off = _read_short(body, 0)
    value, _ = _read_long(body, off)
    return key, value


def key_body(key: bytes) -> bytes:
    return _pack_short(key)


def parse_key(body: bytes) -> bytes:
    key, _ = _read_short(body, 0)
    return key


def topic_body(topic: str) -> bytes:
    return _pack_short(topic.encode("utf-8"))


def parse_topic(body: bytes) -> str:
    raw, _ = _read_short(body, 0)
    return raw.decode("utf-8")


def publish_body(topic: str, payload: bytes) -> bytes:
    return _pack_short(topic.encode("utf-8")) + _pack_long(payload)


def parse_publish(body: bytes) -> tuple[str, bytes]:
    raw, off = _read_short(body, 0)
    payload, _ = _read_long(body, off)
    return raw.decode("utf-8"), payload


def forward_body(origin: str, topic: str, payload: bytes) -> bytes:
    return (
        _pack_short(origin.encode("utf-8"))
        + _pack_short(topic.encode("utf-8"))
        + _pack_long(payload)
    )


def parse_forward(body: bytes) -> tuple[str, str, bytes]:
    origin, off = _read_short(body, 0)
    topic, off = _read_short(body, off)
    payload, _ = _read_long(body, off)
    return origin.decode("utf-8"), topic.decode("utf-8"), payload


LOGSHIP_ACK = 0x01


def logship_body(record_frame: bytes, want_ack: bool) -> bytes:
    return bytes([LOGSHIP_ACK if want_ack else 0]) + record_frame


def parse_logship(body: bytes) -> tuple[bytes, bool]:
    return body[1:], bool(body[0] & LOGSHIP_ACK)


def node_body(node_id: str) -> bytes:
    return _pack_short(node_id.encode("utf-8"))


def parse_node(body: bytes) -> str:
    raw, _ = _read_short(body, 0)
    return raw.decode("utf-8")


# -- response bodies ---------------------------------------------------------

def ok_body(count: int = 0) -> bytes:
    return struct.pack(">I", count)


def parse_ok(body: bytes) -> int:
    if not body:
        return 0
    (count,) = struct.unpack_from(">I", body, 0)
    return count


def value_body(value: bytes) -> bytes:
    return _pack_long(value)


def parse_value(body: bytes) -> bytes:
    value, _ = _read_long(body, 0)
    return value


def moved_body(slot: int, node_id: str, address: str) -> bytes:
    return (
        struct.pack(">H", slot)
        + _pack_short(node_id.encode("utf-8"))
        + _pack_short(address.encode("utf-8"))
    )


def parse_moved(body: bytes) -> tuple[int, str, str]:
    (slot,) = struct.unpack_from(">H", body, 0)
    node, off = _read_short(body, 2)
    addr, _ = _read_short(body, off)
    return slot, node.decode("utf-8"), addr.decode("utf-8")


def error_body(message: str) -> bytes:
    return _pack_short(message.encode("utf-8"))


def parse_error(body: bytes) -> str:
    raw, _ = _read_short(body, 0)
    return raw.decode("utf-8")


def deliver_body(topic: str, payload: bytes) -> bytes:
    return publish_body(topic, payload)


parse_deliver = parse_publish
