"""Clients for the store protocol.

``NodeClient`` speaks to one node: pipelined request/response plus an async
callback for DELIVER pushes. ``ClusterClient`` layers MOVED-redirect handling
on top so callers see location-independent results.
"""

from __future__ import annotations

import asyncio
import json
from collections import deque
from typing import Awaitable, Callable

from . import wirefmt as wf
from .hashslot import hash_slot
from .manifest import ClusterManifest
from .wirefmt import Frame, Opcode

DeliverCallback = Callable[[str, bytes], "Awaitable[None] | None"]

RETRY_BUDGET = 2


class StoreError(Exception):
    pass


class RoutingError(StoreError):
    """Owner unreachable (or redirect loop) after the retry budget."""


class NodeClient:
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 deliver_cb: DeliverCallback | None = None):
        self._reader = reader
        self._writer = writer
        self._deliver_cb = deliver_cb
        self._pending: deque[asyncio.Future] = deque()
        self._closed = False
        self._read_task = asyncio.create_task(self._read_loop())

    @classmethod
    async def connect(cls, address: str, deliver_cb: DeliverCallback | None = None) -> "NodeClient":
        host, port = address.rsplit(":", 1)
        reader, writer = await asyncio.open_connection(host, int(port))
        return cls(reader, writer, deliver_cb)

    @property
    def closed(self) -> bool:
        return self._closed

    async def _read_loop(self) -> None:
        buf = bytearray()
        try:
            while True:
                data = await self._reader.read(65536)
                if not data:
                    break
                buf += data
                while True:
                    decoded = wf.decode_frame(buf)
                    if decoded is None:
                        break
                    frame, consumed = decoded
                    del buf[:consumed]
                    if frame.opcode == Opcode.DELIVER:
                        if self._deliver_cb is not None:
                            topic, payload = wf.parse_deliver(frame.body)
                            result = self._deliver_cb(topic, payload)
                            if asyncio.iscoroutine(result):
                                await result
                    elif self._pending:
                        fut = self._pending.popleft()
                        if not fut.done():
                            fut.set_result(frame)
        except (OSError, wf.WireError):
            pass
        finally:
            self._closed = True
            while self._pending:
                fut = self._pending.popleft()
                if not fut.done():
                    fut.set_exception(StoreError("connection closed"))

    async def request(self, opcode: Opcode, body: bytes = b"", timeout: float = 30.0) -> Frame:
        if self._closed:
            raise StoreError("connection closed")
        fut: asyncio.Future = asyncio.get_running_loop().create_future()
        self._pending.append(fut)
        self._writer.write(wf.encode_frame(opcode, body))
        return await asyncio.wait_for(fut, timeout)

    # convenience verbs ------------------------------------------------------

    async def set(self, key: bytes, value: bytes) -> Frame:
        return await self.request(Opcode.SET, wf.set_body(key, value))

    async def get(self, key: bytes) -> Frame:
        return await self.request(Opcode.GET, wf.key_body(key))

    async def delete(self, key: bytes) -> Frame:
        return await self.request(Opcode.DEL, wf.key_body(key))

    async def subscribe(self, topic: str) -> None:
        resp = await self.request(Opcode.SUBSCRIBE, wf.topic_body(topic))
        if resp.opcode != Opcode.OK:
            raise StoreError(f"subscribe failed: {resp}")

    async def unsubscribe(self, topic: str) -> None:
        resp = await self.request(Opcode.UNSUBSCRIBE, wf.topic_body(topic))
        if resp.opcode != Opcode.OK:
            raise StoreError(f"unsubscribe failed: {resp}")

    async def publish(self, topic: str, payload: bytes) -> int:
        """Publish on the bus; returns the receiving node's local delivery count."""
        resp = await self.request(Opcode.PUBLISH, wf.publish_body(topic, payload))
        if resp.opcode != Opcode.OK:
            raise StoreError(f"publish failed: {resp}")
        return wf.parse_ok(resp.body)

    async def ping(self) -> None:
        resp = await self.request(Opcode.PING)
        if resp.opcode != Opcode.PONG:
            raise StoreError("ping got no pong")

    async def slots(self) -> dict:
        resp = await self.request(Opcode.SLOTS)
        return json.loads(wf.parse_value(resp.body))

    async def stats(self) -> dict:
        resp = await self.request(Opcode.STATS)
        return json.loads(wf.parse_value(resp.body))

    async def failover(self, node_id: str) -> None:
        resp = await self.request(Opcode.FAILOVER, wf.node_body(node_id))
        if resp.opcode != Opcode.OK:
            raise StoreError(f"failover rejected: {resp}")

    def close(self) -> None:
        self._closed = True
        self._read_task.cancel()
        self._writer.close()


class ClusterClient:
    """Location-transparent access: follows MOVED redirects, retries around
    dead nodes within a fixed budget."""

    def __init__(self, manifest: ClusterManifest, deliver_cb: DeliverCallback | None = None):
        self.manifest = manifest
        self.slot_map = manifest.slot_map()
        self._deliver_cb = deliver_cb
        self._conns: dict[str, NodeClient] = {}
        self._addresses: dict[str, str] = {n.node_id: n.address for n in manifest.nodes}

    async def _conn(self, node_id: str) -> NodeClient:
        client = self._conns.get(node_id)
        if client is not None and not client.closed:
            return client
        client = await NodeClient.connect(self._addresses[node_id], self._deliver_cb)
        self._conns[node_id] = client
        return client

    def _default_entry(self, key: bytes) -> str:
        return self.slot_map.owner_of(hash_slot(key))

    async def _kv(self, opcode: Opcode, body: bytes, key: bytes, entry_node: str | None) -> Frame:
        node_id = entry_node or self._default_entry(key)
        last_error: Exception | None = None
        for _ in range(RETRY_BUDGET + 1):
            try:
                client = await self._conn(node_id)
                resp = await client.request(opcode, body)
            except (OSError, StoreError, asyncio.TimeoutError) as exc:
                last_error = exc
                # Target unreachable: ask any other live node, it will redirect.
                alternates = [n for n in self._addresses if n != node_id]
                if not alternates:
                    break
                node_id = alternates[0]
                continue
            if resp.opcode == Opcode.MOVED:
                _slot, owner, address = wf.parse_moved(resp.body)
                self._addresses.setdefault(owner, address)
                node_id = owner
                continue
            if resp.opcode == Opcode.ERROR:
                raise StoreError(wf.parse_error(resp.body))
            return resp
        raise RoutingError(
            f"no owner reachable for key {key!r}: {last_error or 'redirect budget exhausted'}"
        )

    async def set(self, key: bytes, value: bytes, entry_node: str | None = None) -> None:
        resp = await self._kv(Opcode.SET, wf.set_body(key, value), key, entry_node)
        if resp.opcode != Opcode.OK:
            raise StoreError(f"set failed: {resp}")

    async def get(self, key: bytes, entry_node: str | None = None) -> bytes | None:
        resp = await self._kv(Opcode.GET, wf.key_body(key), key, entry_node)
        if resp.opcode == Opcode.NIL:
            return None
        if resp.opcode == Opcode.VALUE:
            return wf.parse_value(resp.body)
        raise StoreError(f"get failed: {resp}")

    async def delete(self, key: bytes, entry_node: str | None = None) -> bool:
        resp = await self._kv(Opcode.DEL, wf.key_body(key), key, entry_node)
        if resp.opcode != Opcode.OK:
            raise StoreError(f"delete failed: {resp}")
        return bool(wf.parse_ok(resp.body))

    async def subscribe(self, topic: str, node_id: str | None = None) -> None:
        node_id = node_id or self.manifest.primaries()[0].node_id
        client = await self._conn(node_id)
        await client.subscribe(topic)

    async def publish(self, topic: str, payload: bytes, node_id: str | None = None) -> int:
        node_id = node_id or self.manifest.primaries()[0].node_id
        client = await self._conn(node_id)
        return await client.publish(topic, payload)

    def close(self) -> None:
        for client in self._conns.values():
            client.close()
        self._conns.clear()
