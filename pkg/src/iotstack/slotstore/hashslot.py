"""CRC16 hash slots and the slot-to-node assignment map.

Keys hash with CRC-16/XMODEM (poly 0x1021, init 0x0000, no reflection) modulo
16384. Slot ownership is a static partition of contiguous intervals, assigned
in node order at bootstrap; failover swaps an interval's owner wholesale.
"""

from __future__ import annotations

SLOT_COUNT = 16384
_POLY = 0x1021


def _build_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ _POLY) & 0xFFFF if crc & 0x8000 else (crc << 1) & 0xFFFF
        table.append(crc)
    return table


_TABLE = _build_table()


def crc16(data: bytes) -> int:
    """Table-driven CRC-16/XMODEM. crc16(b"123456789") == 0x31C3."""
    crc = 0x0000
    table = _TABLE
    for byte in data:
        crc = ((crc << 8) & 0xFFFF) ^ table[(crc >> 8) ^ byte]
    return crc


def hash_slot(key: bytes) -> int:
    return crc16(key) % SLOT_COUNT


class SlotMapError(ValueError):
    pass


class SlotMap:
    """Assignment of all 16384 slots to node ids as contiguous intervals."""

    def __init__(self, intervals: list[tuple[int, int, str]]):
        """``intervals``: (lo, hi, node_id) triples, inclusive bounds.

        They must partition [0, 16383] exactly.
        """
        self._intervals = sorted(intervals)
        self._validate()

    def _validate(self) -> None:
        expected_lo = 0
        for lo, hi, node in self._intervals:
            if lo != expected_lo:
                raise SlotMapError(f"slot {expected_lo} has no owner (next interval starts at {lo})")
            if hi < lo:
                raise SlotMapError(f"empty interval [{lo}, {hi}] for {node}")
            expected_lo = hi + 1
        if expected_lo != SLOT_COUNT:
            raise SlotMapError(f"slots {expected_lo}..{SLOT_COUNT - 1} have no owner")

    def owner_of(self, slot: int) -> str:
        if not 0 <= slot < SLOT_COUNT:
            raise SlotMapError(f"slot {slot} out of range")
        lo_idx, hi_idx = 0, len(self._intervals) - 1
        while lo_idx <= hi_idx:
            mid = (lo_idx + hi_idx) // 2
            lo, hi, node = self._intervals[mid]
            if slot < lo:
                hi_idx = mid - 1
            elif slot > hi:
                lo_idx = mid + 1
            else:
                return node
        raise SlotMapError(f"slot {slot} unowned")  # unreachable after _validate

    def intervals(self) -> list[tuple[int, int, str]]:
        return list(self._intervals)

    def interval_of(self, node_id: str) -> tuple[int, int]:
        for lo, hi, node in self._intervals:
            if node == node_id:
                return lo, hi
        raise SlotMapError(f"node {node_id!r} owns no slots")

    def node_ids(self) -> list[str]:
        return [node for _, _, node in self._intervals]

    def with_owner_replaced(self, old: str, new: str) -> "SlotMap":
        """Failover: every interval owned by ``old`` moves to ``new``."""
        return SlotMap(
            [(lo, hi, new if node == old else node) for lo, hi, node in self._intervals]
        )

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SlotMap) and self._intervals == other._intervals

    def __repr__(self) -> str:
        return f"SlotMap({self._intervals!r})"


def equal_intervals(node_ids: list[str]) -> SlotMap:
    """Split the slot space into equal contiguous intervals, in node order.

    The first ``SLOT_COUNT % n`` nodes take one extra slot when the split is
    not exact.
    """
    if not node_ids:
        raise SlotMapError("at least one node required")
    n = len(node_ids)
    base, extra = divmod(SLOT_COUNT, n)
    intervals = []
    lo = 0
    for i, node in enumerate(node_ids):
        size = base + (1 if i < extra else 0)
        intervals.append((lo, lo + size - 1, node))
        lo += size
    return SlotMap(intervals)


def route(key: bytes, slot_map: SlotMap) -> str:
    """Node id owning ``key``'s hash slot."""
    return slot_map.owner_of(hash_slot(key))
