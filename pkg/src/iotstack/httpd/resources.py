"""Resource stores behind the HTTP server: in-memory or slot-cluster backed."""

from __future__ import annotations

import struct

from ..slotstore import ClusterClient
from ..slotstore.hashslot import crc16

BENCH_PAGE_PATH = "/bench/page"
BENCH_PAGE_SIZE = 1024


def build_bench_page() -> bytes:
    """Deterministic 1024-byte page: checksum header line plus a repeating
    fill pattern. Byte-identical on every call."""
    pattern = b"The quick brown fox jumps over the lazy dog 0123456789.\n"
    header_template = "bench-page crc16=0x%04X size=1024\n"
    header_len = len(header_template % 0)
    fill_len = BENCH_PAGE_SIZE - header_len
    fill = (pattern * (fill_len // len(pattern) + 1))[:fill_len]
    page = (header_template % crc16(fill)).encode("ascii") + fill
    assert len(page) == BENCH_PAGE_SIZE
    return page


def normalize_path(path: str) -> str | None:
    """Return the path if it is already normalized and absolute, else None."""
    if not path.startswith("/"):
        return None
    if "//" in path or "/../" in path or path.endswith("/.."):
        return None
    if any(seg == ".." for seg in path.split("/")):
        return None
    return path


class MemoryStore:
    """Per-process resource table; reads are lock-free, writes are serialized
    by the event loop."""

    def __init__(self):
        self._table: dict[str, tuple[bytes, str]] = {}

    async def get(self, path: str) -> tuple[bytes, str] | None:
        return self._table.get(path)

    async def put(self, path: str, body: bytes, content_type: str) -> bool:
        created = path not in self._table
        self._table[path] = (body, content_type)
        return created

    async def delete(self, path: str) -> bool:
        return self._table.pop(path, None) is not None

    def close(self) -> None:
        pass


class SlotBackedStore:
    """Resources persisted as cluster keys (path -> packed body), exercising
    the database path instead of process memory."""

    def __init__(self, cluster: ClusterClient):
        self._cluster = cluster

    @staticmethod
    def _pack(body: bytes, content_type: str) -> bytes:
        ct = content_type.encode("utf-8")
        return struct.pack(">H", len(ct)) + ct + body

    @staticmethod
    def _unpack(blob: bytes) -> tuple[bytes, str]:
        (n,) = struct.unpack_from(">H", blob, 0)
        return blob[2 + n :], blob[2 : 2 + n].decode("utf-8")

    async def get(self, path: str) -> tuple[bytes, str] | None:
        blob = await self._cluster.get(path.encode("utf-8"))
        if blob is None:
            return None
        return self._unpack(blob)

    async def put(self, path: str, body: bytes, content_type: str) -> bool:
        key = path.encode("utf-8")
        existed = await self._cluster.get(key) is not None
        await self._cluster.set(key, self._pack(body, content_type))
        return not existed

    async def delete(self, path: str) -> bool:
        return await self._cluster.delete(path.encode("utf-8"))

    def close(self) -> None:
        self._cluster.close()
