"""Append-only transaction log: length-prefixed binary records, CRC16 each.

Record frame: u32 payload length, payload, u16 CRC-16/XMODEM of the payload.
Payload: u64 sequence, u64 timestamp (ms), u8 op (1=set 2=del), u16 key
length, key, u32 value length, value. A torn final record (crash mid-append)
is truncated on recovery; corruption before the tail is an error.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass
from typing import Iterable, Iterator

from .hashslot import crc16

OP_SET = 1
OP_DEL = 2

_HEADER = struct.Struct(">I")
_CRC = struct.Struct(">H")
_BODY_FIXED = struct.Struct(">QQBH")


class CorruptLogError(Exception):
    def __init__(self, message: str, sequence: int | None = None):
        super().__init__(message)
        self.sequence = sequence


@dataclass(frozen=True)
class LogRecord:
    sequence: int
    op: int  # OP_SET or OP_DEL
    key: bytes
    value: bytes = b""
    timestamp_ms: int = 0

    @classmethod
    def set(cls, sequence: int, key: bytes, value: bytes) -> "LogRecord":
        return cls(sequence, OP_SET, key, value, int(time.time() * 1000))

    @classmethod
    def delete(cls, sequence: int, key: bytes) -> "LogRecord":
        return cls(sequence, OP_DEL, key, b"", int(time.time() * 1000))


def encode_record(rec: LogRecord) -> bytes:
    body = (
        _BODY_FIXED.pack(rec.sequence, rec.timestamp_ms, rec.op, len(rec.key))
        + rec.key
        + struct.pack(">I", len(rec.value))
        + rec.value
    )
    return _HEADER.pack(len(body)) + body + _CRC.pack(crc16(body))


def decode_record_body(body: bytes) -> LogRecord:
    seq, ts, op, klen = _BODY_FIXED.unpack_from(body, 0)
    off = _BODY_FIXED.size
    key = body[off : off + klen]
    off += klen
    (vlen,) = struct.unpack_from(">I", body, off)
    off += 4
    value = body[off : off + vlen]
    if op not in (OP_SET, OP_DEL):
        raise CorruptLogError(f"unknown op {op} at sequence {seq}", seq)
    return LogRecord(seq, op, key, value, ts)


class LogWriter:
    """Appends records to a log file; flushed per record."""

    def __init__(self, path: str, fsync: bool = False):
        self.path = path
        self._fsync = fsync
        self._file = open(path, "ab")

    def append(self, rec: LogRecord) -> None:
        self._file.write(encode_record(rec))
        self._file.flush()
        if self._fsync:
            os.fsync(self._file.fileno())

    def close(self) -> None:
        self._file.close()


def read_log(path: str, truncate_torn_tail: bool = True) -> list[LogRecord]:
    """Read every intact record; a torn final record is dropped (and the file
    truncated when ``truncate_torn_tail``). Damage before the tail raises."""
    with open(path, "rb") as f:
        data = f.read()

    records: list[LogRecord] = []
    off = 0
    good_end = 0
    while off < len(data):
        if off + _HEADER.size > len(data):
            break  # torn length prefix
        (blen,) = _HEADER.unpack_from(data, off)
        frame_end = off + _HEADER.size + blen + _CRC.size
        if frame_end > len(data):
            break  # torn record body
        body = data[off + _HEADER.size : off + _HEADER.size + blen]
        (stored_crc,) = _CRC.unpack_from(data, off + _HEADER.size + blen)
        if crc16(body) != stored_crc:
            if frame_end == len(data):
                break  # bad checksum right at the tail: torn append
            raise CorruptLogError(f"checksum mismatch at byte offset {off}")
        records.append(decode_record_body(body))
        off = frame_end
        good_end = frame_end

    if off < len(data) or good_end < len(data):
        if not truncate_torn_tail:
            raise CorruptLogError(f"torn record at byte offset {good_end}")
        with open(path, "r+b") as f:
            f.truncate(good_end)

    verify_sequences(records)
    return records


def verify_sequences(records: Iterable[LogRecord]) -> None:
    """Sequences must increase strictly with no gaps within one log."""
    prev = None
    for rec in records:
        if prev is not None and rec.sequence != prev + 1:
            raise CorruptLogError(
                f"sequence {rec.sequence} after {prev}: gap or regression",
                rec.sequence,
            )
        prev = rec.sequence


def replay_log(records: Iterable[LogRecord]) -> dict[bytes, bytes]:
    """Rebuild the key-value table by applying records in order."""
    table: dict[bytes, bytes] = {}
    prev = None
    for rec in records:
        if prev is not None and rec.sequence != prev + 1:
            raise CorruptLogError(
                f"sequence {rec.sequence} after {prev}: gap or regression",
                rec.sequence,
            )
        prev = rec.sequence
        apply_record(table, rec)
    return table


def apply_record(table: dict[bytes, bytes], rec: LogRecord) -> None:
    if rec.op == OP_SET:
        table[rec.key] = rec.value
    else:
        table.pop(rec.key, None)


def iter_log_frames(records: Iterable[LogRecord]) -> Iterator[bytes]:
    for rec in records:
        yield encode_record(rec)
