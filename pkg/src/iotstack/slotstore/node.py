"""A store node: in-memory table for its slot interval, channel pub/sub with
full-mesh forwarding, transaction logging, log shipping to a hot standby, and
ping-based peer failure detection with standby promotion.

All table mutations and log appends happen synchronously inside one event
loop, so each node is a single serialization point; peer links and client
connections are serviced concurrently around it.
"""

from __future__ import annotations

import asyncio
import json
import logging
from collections import deque

from . import wirefmt as wf
from .hashslot import hash_slot
from .manifest import ClusterManifest, NodeSpec
from .txlog import (
    LogRecord,
    LogWriter,
    apply_record,
    decode_record_body,
    encode_record,
    read_log,
)
from .wirefmt import Frame, Opcode

log = logging.getLogger("slotstore")

PING_INTERVAL = 1.0
PING_MISS_LIMIT = 3
SHIP_ACK_TIMEOUT = 5.0
RECONNECT_DELAY = 0.3


class PeerDown(Exception):
    pass


class PeerLink:
    """Outgoing connection to one peer, with reconnect and FIFO ack matching."""

    def __init__(self, node: "StoreNode", peer: NodeSpec):
        self.node = node
        self.peer = peer
        self._writer: asyncio.StreamWriter | None = None
        self._pending: deque[asyncio.Future] = deque()
        self._stopped = False
        self._connected = asyncio.Event()
        self._task = asyncio.create_task(self._run())

    @property
    def connected(self) -> bool:
        return self._writer is not None

    async def _run(self) -> None:
        while not self._stopped:
            try:
                reader, writer = await asyncio.open_connection(
                    self.peer.host, self.peer.port
                )
            except OSError:
                await asyncio.sleep(RECONNECT_DELAY)
                continue
            self._writer = writer
            self._connected.set()
            try:
                await self._read_loop(reader)
            except (OSError, wf.WireError):
                pass
            finally:
                self._writer = None
                self._connected.clear()
                writer.close()
                self._fail_pending()
            await asyncio.sleep(RECONNECT_DELAY)

    async def _read_loop(self, reader: asyncio.StreamReader) -> None:
        buf = bytearray()
        while True:
            data = await reader.read(65536)
            if not data:
                return
            buf += data
            while True:
                decoded = wf.decode_frame(buf)
                if decoded is None:
                    break
                frame, consumed = decoded
                del buf[:consumed]
                if frame.opcode in wf.RESPONSE_OPCODES and self._pending:
                    fut = self._pending.popleft()
                    if not fut.done():
                        fut.set_result(frame)

    def _fail_pending(self) -> None:
        while self._pending:
            fut = self._pending.popleft()
            if not fut.done():
                fut.set_exception(PeerDown(self.peer.node_id))

    def send(self, opcode: Opcode, body: bytes) -> bool:
        """Fire-and-forget; returns False when the link is down."""
        if self._writer is None:
            return False
        try:
            self._writer.write(wf.encode_frame(opcode, body))
        except (OSError, RuntimeError):
            return False
        return True

    async def request(self, opcode: Opcode, body: bytes, timeout: float) -> Frame:
        if self._writer is None:
            raise PeerDown(self.peer.node_id)
        fut: asyncio.Future = asyncio.get_running_loop().create_future()
        self._pending.append(fut)
        self._writer.write(wf.encode_frame(opcode, body))
        return await asyncio.wait_for(fut, timeout)

    async def stop(self) -> None:
        self._stopped = True
        self._task.cancel()
        try:
            await self._task
        except (asyncio.CancelledError, Exception):
            pass
        if self._writer is not None:
            self._writer.close()


class StoreNode:
    def __init__(
        self,
        manifest: ClusterManifest,
        node_id: str,
        *,
        ping_interval: float = PING_INTERVAL,
        ping_miss_limit: int = PING_MISS_LIMIT,
    ):
        self.manifest = manifest
        self.spec = manifest.node(node_id)
        self.node_id = node_id
        self.slot_map = manifest.slot_map()
        self.strict = manifest.replication == "strict"
        self.ping_interval = ping_interval
        self.ping_miss_limit = ping_miss_limit

        self.table: dict[bytes, bytes] = {}
        self.sequence = 0
        self.log_writer: LogWriter | None = None
        self.serving = not self.spec.is_standby
        self.dead: set[str] = set()
        self.subs: dict[str, set[asyncio.StreamWriter]] = {}
        self._conn_topics: dict[asyncio.StreamWriter, set[str]] = {}
        self.standby_spec = manifest.standby_for(node_id)
        self.peers: dict[str, PeerLink] = {}
        self.stats = {
            "delivered_local": 0,
            "forwards_sent": 0,
            "forwards_received": 0,
            "forward_drops": 0,
            "ship_failures": 0,
            "commands": 0,
            "moved": 0,
        }
        self._server: asyncio.AbstractServer | None = None
        self._ping_tasks: list[asyncio.Task] = []
        self._client_writers: set[asyncio.StreamWriter] = set()

    # -- lifecycle -----------------------------------------------------------

    async def start(self) -> None:
        self._recover_from_log()
        self._server = await asyncio.start_server(
            self._handle_connection, self.spec.host, self.spec.port
        )
        for peer_spec in self.manifest.nodes:
            if peer_spec.node_id == self.node_id:
                continue
            link = PeerLink(self, peer_spec)
            self.peers[peer_spec.node_id] = link
            self._ping_tasks.append(asyncio.create_task(self._ping_loop(link)))
        log.info(
            "node %s listening on %s (serving=%s)",
            self.node_id,
            self.spec.address,
            self.serving,
        )

    def _recover_from_log(self) -> None:
        if not self.spec.log_path:
            return
        try:
            records = read_log(self.spec.log_path)
        except FileNotFoundError:
            records = []
        for rec in records:
            apply_record(self.table, rec)
        if records:
            self.sequence = records[-1].sequence
            log.info("node %s recovered %d records", self.node_id, len(records))
        self.log_writer = LogWriter(self.spec.log_path)

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in self._ping_tasks:
            task.cancel()
        for link in self.peers.values():
            await link.stop()
        # Established connections must die with the node, or peers keep
        # getting pong answers from a "killed" node.
        for writer in list(self._client_writers):
            writer.close()
        if self.log_writer is not None:
            self.log_writer.close()

    # -- failure detection ---------------------------------------------------

    async def _ping_loop(self, link: PeerLink) -> None:
        misses = 0
        while True:
            await asyncio.sleep(self.ping_interval)
            if link.peer.node_id in self.dead:
                return
            try:
                await link.request(Opcode.PING, b"", timeout=self.ping_interval * 0.9)
                misses = 0
            except (PeerDown, asyncio.TimeoutError, OSError):
                misses += 1
                if misses >= self.ping_miss_limit:
                    self.mark_dead(link.peer.node_id)
                    return

    def mark_dead(self, node_id: str) -> None:
        """Record a peer failure and re-point its slots at its standby."""
        if node_id in self.dead or node_id == self.node_id:
            return
        self.dead.add(node_id)
        standby = self.manifest.standby_for(node_id)
        if standby is None:
            log.warning("node %s: peer %s dead, no standby; slots unavailable", self.node_id, node_id)
            return
        try:
            self.slot_map = self.slot_map.with_owner_replaced(node_id, standby.node_id)
        except Exception:
            return
        if standby.node_id == self.node_id:
            self.serving = True
            log.warning(
                "node %s: promoted to serve for dead primary %s at sequence %d",
                self.node_id,
                node_id,
                self.sequence,
            )
        else:
            log.warning("node %s: peer %s dead, slots now at %s", self.node_id, node_id, standby.node_id)

    # -- connection handling -------------------------------------------------

    async def _handle_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        buf = bytearray()
        self._client_writers.add(writer)
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    return
                buf += data
                while True:
                    decoded = wf.decode_frame(buf)
                    if decoded is None:
                        break
                    frame, consumed = decoded
                    del buf[:consumed]
                    await self._dispatch(frame, writer)
        except (OSError, wf.WireError, ConnectionResetError):
            pass
        finally:
            self._client_writers.discard(writer)
            self._drop_connection(writer)
            writer.close()

    def _drop_connection(self, writer: asyncio.StreamWriter) -> None:
        for topic in self._conn_topics.pop(writer, ()):
            conns = self.subs.get(topic)
            if conns is not None:
                conns.discard(writer)
                if not conns:
                    del self.subs[topic]

    def _reply(self, writer: asyncio.StreamWriter, opcode: Opcode, body: bytes = b"") -> None:
        writer.write(wf.encode_frame(opcode, body))

    async def _dispatch(self, frame: Frame, writer: asyncio.StreamWriter) -> None:
        op = frame.opcode
        if op == Opcode.PING:
            self._reply(writer, Opcode.PONG)
        elif op == Opcode.SET:
            key, value = wf.parse_set(frame.body)
            await self._handle_set(key, value, writer)
        elif op == Opcode.GET:
            self._handle_get(wf.parse_key(frame.body), writer)
        elif op == Opcode.DEL:
            await self._handle_del(wf.parse_key(frame.body), writer)
        elif op == Opcode.SUBSCRIBE:
            topic = wf.parse_topic(frame.body)
            self.subs.setdefault(topic, set()).add(writer)
            self._conn_topics.setdefault(writer, set()).add(topic)
            self._reply(writer, Opcode.OK, wf.ok_body())
        elif op == Opcode.UNSUBSCRIBE:
            topic = wf.parse_topic(frame.body)
            conns = self.subs.get(topic)
            if conns is not None:
                conns.discard(writer)
                if not conns:
                    del self.subs[topic]
            self._conn_topics.get(writer, set()).discard(topic)
            self._reply(writer, Opcode.OK, wf.ok_body())
        elif op == Opcode.PUBLISH:
            topic, payload = wf.parse_publish(frame.body)
            delivered = self._deliver_local(topic, payload)
            forwarded = self._forward_to_peers(topic, payload)
            self.stats["forwards_sent"] += forwarded
            self._reply(writer, Opcode.OK, wf.ok_body(delivered))
        elif op == Opcode.FORWARD:
            origin, topic, payload = wf.parse_forward(frame.body)
            self.stats["forwards_received"] += 1
            self._deliver_local(topic, payload)
            # never re-forwarded, never answered: at-most-once between nodes
        elif op == Opcode.LOGSHIP:
            record_frame, want_ack = wf.parse_logship(frame.body)
            ok = self._apply_shipped(record_frame)
            if want_ack:
                if ok:
                    self._reply(writer, Opcode.OK, wf.ok_body())
                else:
                    self._reply(writer, Opcode.ERROR, wf.error_body("logship sequence mismatch"))
        elif op == Opcode.SLOTS:
            doc = {
                "node": self.node_id,
                "serving": self.serving,
                "intervals": [list(iv) for iv in self.slot_map.intervals()],
                "dead": sorted(self.dead),
            }
            self._reply(writer, Opcode.VALUE, wf.value_body(json.dumps(doc).encode()))
        elif op == Opcode.STATS:
            doc = dict(self.stats)
            doc.update(
                node=self.node_id,
                keys=len(self.table),
                sequence=self.sequence,
                serving=self.serving,
                subscriptions=sum(len(c) for c in self.subs.values()),
                dead=sorted(self.dead),
            )
            self._reply(writer, Opcode.VALUE, wf.value_body(json.dumps(doc).encode()))
        elif op == Opcode.FAILOVER:
            self.mark_dead(wf.parse_node(frame.body))
            self._reply(writer, Opcode.OK, wf.ok_body())
        else:
            self._reply(writer, Opcode.ERROR, wf.error_body(f"unexpected opcode {op}"))

    # -- key-value -----------------------------------------------------------

    def _owner_or_moved(self, key: bytes, writer: asyncio.StreamWriter) -> bool:
        """True when this node may execute on ``key``; else reply MOVED."""
        slot = hash_slot(key)
        owner = self.slot_map.owner_of(slot)
        if owner == self.node_id and self.serving:
            return True
        self.stats["moved"] += 1
        self._reply(
            writer,
            Opcode.MOVED,
            wf.moved_body(slot, owner, self.manifest.address_of(owner)),
        )
        return False

    async def _handle_set(self, key: bytes, value: bytes, writer: asyncio.StreamWriter) -> None:
        self.stats["commands"] += 1
        if not self._owner_or_moved(key, writer):
            return
        self.sequence += 1
        rec = LogRecord.set(self.sequence, key, value)
        self._append_and_apply(rec)
        await self._replicate(rec)
        self._reply(writer, Opcode.OK, wf.ok_body())

    def _handle_get(self, key: bytes, writer: asyncio.StreamWriter) -> None:
        self.stats["commands"] += 1
        if not self._owner_or_moved(key, writer):
            return
        value = self.table.get(key)
        if value is None:
            self._reply(writer, Opcode.NIL)
        else:
            self._reply(writer, Opcode.VALUE, wf.value_body(value))

    async def _handle_del(self, key: bytes, writer: asyncio.StreamWriter) -> None:
        self.stats["commands"] += 1
        if not self._owner_or_moved(key, writer):
            return
        existed = key in self.table
        self.sequence += 1
        rec = LogRecord.delete(self.sequence, key)
        self._append_and_apply(rec)
        await self._replicate(rec)
        self._reply(writer, Opcode.OK, wf.ok_body(1 if existed else 0))

    def _append_and_apply(self, rec: LogRecord) -> None:
        if self.log_writer is not None:
            self.log_writer.append(rec)
        apply_record(self.table, rec)

    async def _replicate(self, rec: LogRecord) -> None:
        """Ship the record to the standby; in strict mode wait for its ack."""
        if self.standby_spec is None or self.standby_spec.node_id in self.dead:
            return
        link = self.peers.get(self.standby_spec.node_id)
        if link is None:
            return
        frame_bytes = encode_record(rec)
        if not self.strict:
            if not link.send(Opcode.LOGSHIP, wf.logship_body(frame_bytes, want_ack=False)):
                self.stats["ship_failures"] += 1
            return
        try:
            resp = await link.request(
                Opcode.LOGSHIP, wf.logship_body(frame_bytes, want_ack=True), SHIP_ACK_TIMEOUT
            )
            if resp.opcode != Opcode.OK:
                self.stats["ship_failures"] += 1
        except (PeerDown, asyncio.TimeoutError, OSError):
            self.stats["ship_failures"] += 1

    def _apply_shipped(self, record_frame: bytes) -> bool:
        # record_frame is a full log frame: u32 len + body + crc16
        body = record_frame[4 : 4 + len(record_frame) - 6]
        rec = decode_record_body(body)
        if rec.sequence <= self.sequence:
            return True  # duplicate ship, already applied
        if rec.sequence != self.sequence + 1:
            log.error(
                "node %s: shipped sequence %d but local is %d",
                self.node_id,
                rec.sequence,
                self.sequence,
            )
            return False
        self.sequence = rec.sequence
        self._append_and_apply(rec)
        return True

    # -- channels --------------------------------------------------------------

    def _deliver_local(self, topic: str, payload: bytes) -> int:
        conns = self.subs.get(topic)
        if not conns:
            return 0
        frame = wf.encode_frame(Opcode.DELIVER, wf.deliver_body(topic, payload))
        delivered = 0
        for conn in list(conns):
            if conn.is_closing():
                continue
            try:
                conn.write(frame)
                delivered += 1
            except (OSError, RuntimeError):
                pass
        self.stats["delivered_local"] += delivered
        return delivered

    def _forward_to_peers(self, topic: str, payload: bytes) -> int:
        body = wf.forward_body(self.node_id, topic, payload)
        sent = 0
        for peer_id, link in self.peers.items():
            if peer_id in self.dead:
                continue
            if link.send(Opcode.FORWARD, body):
                sent += 1
            else:
                self.stats["forward_drops"] += 1
        return sent


async def run_node(manifest: ClusterManifest, node_id: str) -> None:
    node = StoreNode(manifest, node_id)
    await node.start()
    try:
        await asyncio.Event().wait()
    finally:
        await node.stop()
