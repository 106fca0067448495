"""MQTT-subset broker instance.

Sessions are per-connection; the subscription table is per instance. All
message delivery rides the store cluster's channel bus: a publish accepted
from a client is pushed onto the bus, and every instance subscribed to that
topic (the origin included) delivers the loopback to its local subscribers at
the effective QoS. Without a bus manifest the instance delivers locally,
which is the degenerate single-instance mode.

One JSON object per event (connect, subscribe, publish, deliver, disconnect)
goes to the ``broker.events`` logger for harnesses to parse.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time

from ..mqtt import (
    AckTimeout,
    ConnAck,
    Connect,
    Disconnect,
    MqttError,
    OutboundPublish,
    Packet,
    PingReq,
    PingResp,
    PubAck,
    PubComp,
    Publish,
    PubRec,
    PubRel,
    QosSessionState,
    Received,
    RetryLimitExceeded,
    SubAck,
    Subscribe,
    UnsubAck,
    Unsubscribe,
    decode_packet,
    encode_packet,
    qos_step,
)
from ..slotstore import ClusterManifest, NodeClient

log = logging.getLogger("broker")
events = logging.getLogger("broker.events")

ACK_TIMEOUT = 5.0
KEEPALIVE_GRACE = 1.5
SWEEP_INTERVAL = 1.0
CONNACK_UNACCEPTABLE_PROTOCOL = 1


def _bus_pack(qos: int, payload: bytes) -> bytes:
    return bytes([qos]) + payload


def _bus_unpack(raw: bytes) -> tuple[int, bytes]:
    return raw[0], raw[1:]


class Session:
    def __init__(self, client_id: str, writer: asyncio.StreamWriter, keep_alive: int):
        self.client_id = client_id
        self.writer = writer
        self.keep_alive = keep_alive
        self.subscriptions: dict[str, int] = {}  # topic -> granted max qos
        self.qos_state = QosSessionState()
        self.last_activity = time.monotonic()
        self.timers: dict[int, asyncio.TimerHandle] = {}
        self.closed = False

    def send(self, packet: Packet) -> None:
        if not self.closed and not self.writer.is_closing():
            self.writer.write(encode_packet(packet))


class BusLink:
    """Store-cluster connection used as the message bus; resubscribes after
    reconnecting so instance restarts and bus blips self-heal."""

    def __init__(self, manifest: ClusterManifest, node_id: str, on_deliver):
        self.manifest = manifest
        self.node_id = node_id
        self.address = manifest.address_of(node_id)
        self.on_deliver = on_deliver
        self.topics: set[str] = set()
        self._client: NodeClient | None = None
        self._stopped = False
        self._task: asyncio.Task | None = None

    async def start(self) -> None:
        self._client = await NodeClient.connect(self.address, deliver_cb=self.on_deliver)
        self._task = asyncio.create_task(self._watch())

    async def _watch(self) -> None:
        while not self._stopped:
            await asyncio.sleep(0.5)
            if self._client is not None and not self._client.closed:
                continue
            try:
                self._client = await NodeClient.connect(self.address, deliver_cb=self.on_deliver)
                for topic in self.topics:
                    await self._client.subscribe(topic)
                log.warning("bus link to %s re-established", self.node_id)
            except OSError:
                self._client = None

    async def subscribe(self, topic: str) -> None:
        self.topics.add(topic)
        if self._client is not None and not self._client.closed:
            await self._client.subscribe(topic)

    async def unsubscribe(self, topic: str) -> None:
        self.topics.discard(topic)
        if self._client is not None and not self._client.closed:
            await self._client.unsubscribe(topic)

    async def publish(self, topic: str, payload: bytes) -> None:
        if self._client is None or self._client.closed:
            raise OSError("bus link down")
        await self._client.publish(topic, payload)

    async def stop(self) -> None:
        self._stopped = True
        if self._task is not None:
            self._task.cancel()
        if self._client is not None:
            self._client.close()


class BrokerInstance:
    def __init__(
        self,
        host: str,
        port: int,
        bus_manifest: ClusterManifest | None = None,
        *,
        instance_index: int = 0,
        keepalive_default: int = 60,
        ack_timeout: float = ACK_TIMEOUT,
    ):
        self.host = host
        self.port = port
        self.instance_index = instance_index
        self.keepalive_default = keepalive_default
        self.ack_timeout = ack_timeout
        self.sessions: dict[str, Session] = {}
        self.topic_sessions: dict[str, set[Session]] = {}
        self.bus: BusLink | None = None
        self._bus_manifest = bus_manifest
        self._server: asyncio.AbstractServer | None = None
        self._sweeper: asyncio.Task | None = None
        self._anon_counter = 0
        self.stats = {"connects": 0, "publishes": 0, "deliveries": 0, "disconnects": 0}

    def _event(self, event: str, **fields) -> None:
        fields["event"] = event
        fields["instance"] = self.instance_index
        events.info(json.dumps(fields, separators=(",", ":")))

    async def start(self) -> None:
        if self._bus_manifest is not None:
            primaries = self._bus_manifest.primaries()
            node = primaries[self.instance_index % len(primaries)]
            self.bus = BusLink(self._bus_manifest, node.node_id, self._on_bus_deliver)
            await self.bus.start()
        try:
            self._server = await asyncio.start_server(self._handle_connection, self.host, self.port)
        except OSError as exc:
            raise OSError(f"cannot bind {self.host}:{self.port}: {exc}") from exc
        self._sweeper = asyncio.create_task(self._sweep_idle_sessions())
        log.info("broker instance %d listening on %s:%d", self.instance_index, self.host, self.port)

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self._sweeper is not None:
            self._sweeper.cancel()
        for session in list(self.sessions.values()):
            self._close_session(session, "shutdown")
        if self.bus is not None:
            await self.bus.stop()

    # -- session plumbing ------------------------------------------------------

    def _close_session(self, session: Session, reason: str) -> None:
        if session.closed:
            return
        session.closed = True
        for timer in session.timers.values():
            timer.cancel()
        session.timers.clear()
        for topic in list(session.subscriptions):
            self._remove_subscription(session, topic)
        if self.sessions.get(session.client_id) is session:
            del self.sessions[session.client_id]
        session.writer.close()
        self.stats["disconnects"] += 1
        self._event("disconnect", client=session.client_id, reason=reason)

    def _remove_subscription(self, session: Session, topic: str) -> None:
        session.subscriptions.pop(topic, None)
        holders = self.topic_sessions.get(topic)
        if holders is not None:
            holders.discard(session)
            if not holders:
                del self.topic_sessions[topic]
                if self.bus is not None:
                    asyncio.ensure_future(self.bus.unsubscribe(topic))

    async def _sweep_idle_sessions(self) -> None:
        while True:
            await asyncio.sleep(SWEEP_INTERVAL)
            now = time.monotonic()
            for session in list(self.sessions.values()):
                if session.keep_alive <= 0:
                    continue
                if now - session.last_activity > KEEPALIVE_GRACE * session.keep_alive:
                    self._close_session(session, "keepalive-timeout")

    # -- connection handling ---------------------------------------------------

    async def _handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        session: Session | None = None
        buf = bytearray()
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    return
                buf += data
                while True:
                    decoded = decode_packet(bytes(buf))
                    if decoded is None:
                        break
                    packet, consumed = decoded
                    del buf[:consumed]
                    if session is None:
                        session = self._handle_connect(packet, writer)
                        if session is None:
                            return
                    else:
                        session.last_activity = time.monotonic()
                        if not await self._dispatch(session, packet):
                            return
        except (MqttError, RetryLimitExceeded, ConnectionResetError, OSError):
            pass
        finally:
            if session is not None:
                self._close_session(session, "connection-closed")
            else:
                writer.close()

    def _handle_connect(self, packet: Packet, writer: asyncio.StreamWriter) -> Session | None:
        if not isinstance(packet, Connect):
            writer.close()
            return None
        if packet.protocol_level != 4:
            writer.write(encode_packet(ConnAck(return_code=CONNACK_UNACCEPTABLE_PROTOCOL)))
            writer.close()
            return None
        client_id = packet.client_id
        if not client_id:
            self._anon_counter += 1
            client_id = f"anon-{self.instance_index}-{self._anon_counter}"
        old = self.sessions.get(client_id)
        if old is not None:
            self._close_session(old, "displaced")
        keep_alive = packet.keep_alive if packet.keep_alive else self.keepalive_default
        if packet.keep_alive == 0:
            keep_alive = 0  # client explicitly disabled keepalive
        session = Session(client_id, writer, keep_alive)
        self.sessions[client_id] = session
        session.send(ConnAck(return_code=0, session_present=False))
        self.stats["connects"] += 1
        self._event("connect", client=client_id, keepalive=keep_alive)
        return session

    async def _dispatch(self, session: Session, packet: Packet) -> bool:
        """Process one packet; False closes the connection."""
        if isinstance(packet, Connect):
            return False  # second CONNECT is a protocol violation
        if isinstance(packet, PingReq):
            session.send(PingResp())
            return True
        if isinstance(packet, Disconnect):
            return False
        if isinstance(packet, Subscribe):
            return await self._handle_subscribe(session, packet)
        if isinstance(packet, Unsubscribe):
            return await self._handle_unsubscribe(session, packet)
        if isinstance(packet, Publish):
            return await self._handle_publish(session, packet)
        if isinstance(packet, (PubAck, PubRec, PubRel, PubComp)):
            return self._handle_ack(session, packet)
        return False

    async def _handle_subscribe(self, session: Session, packet: Subscribe) -> bool:
        granted = []
        for topic, requested_qos in packet.topics:
            max_qos = min(requested_qos, 2)
            first_for_topic = topic not in self.topic_sessions
            session.subscriptions[topic] = max_qos
            self.topic_sessions.setdefault(topic, set()).add(session)
            if first_for_topic and self.bus is not None:
                try:
                    await self.bus.subscribe(topic)
                except OSError:
                    log.warning("bus subscribe for %s failed; local-only until reconnect", topic)
            granted.append(max_qos)
            self._event("subscribe", client=session.client_id, topic=topic, qos=max_qos)
        session.send(SubAck(packet_id=packet.packet_id, return_codes=tuple(granted)))
        return True

    async def _handle_unsubscribe(self, session: Session, packet: Unsubscribe) -> bool:
        for topic in packet.topics:
            self._remove_subscription(session, topic)
        session.send(UnsubAck(packet_id=packet.packet_id))
        return True

    async def _handle_publish(self, session: Session, packet: Publish) -> bool:
        new_state, actions, accepted = self._qos_step(session, Received(packet))
        if new_state is None:
            return False
        for action in actions:
            session.send(action)
        for publish in accepted:
            self.stats["publishes"] += 1
            self._event(
                "publish",
                client=session.client_id,
                topic=publish.topic,
                qos=publish.qos,
                bytes=len(publish.payload),
            )
            await self._fan_out(publish)
        return True

    def _handle_ack(self, session: Session, packet: Packet) -> bool:
        new_state, actions, _ = self._qos_step(session, Received(packet))
        if new_state is None:
            return False
        for action in actions:
            session.send(action)
        return True

    def _qos_step(self, session: Session, event):
        """Run qos_step for the session, reconciling retransmission timers."""
        try:
            new_state, actions, deliveries = qos_step(session.qos_state, event)
        except RetryLimitExceeded:
            self._close_session(session, "retry-limit")
            return None, [], []
        session.qos_state = new_state
        self._reconcile_timers(session)
        return new_state, actions, deliveries

    def _reconcile_timers(self, session: Session) -> None:
        pending = set(session.qos_state.outbound)
        for pid in list(session.timers):
            if pid not in pending:
                session.timers.pop(pid).cancel()
        loop = asyncio.get_running_loop()
        for pid in pending:
            if pid not in session.timers:
                session.timers[pid] = loop.call_later(
                    self.ack_timeout, self._on_ack_timeout, session, pid
                )

    def _on_ack_timeout(self, session: Session, packet_id: int) -> None:
        session.timers.pop(packet_id, None)
        if session.closed:
            return
        result = self._qos_step(session, AckTimeout(packet_id=packet_id))
        if result[0] is None:
            return
        for action in result[1]:
            session.send(action)

    # -- fan-out ----------------------------------------------------------------

    async def _fan_out(self, publish: Publish) -> None:
        if self.bus is not None:
            try:
                await self.bus.publish(publish.topic, _bus_pack(publish.qos, publish.payload))
            except OSError:
                log.warning("bus publish dropped for topic %s", publish.topic)
            return
        self._deliver_local(publish.topic, publish.qos, publish.payload)

    def _on_bus_deliver(self, topic: str, raw: bytes) -> None:
        qos, payload = _bus_unpack(raw)
        self._deliver_local(topic, qos, payload)

    def _deliver_local(self, topic: str, publish_qos: int, payload: bytes) -> None:
        holders = self.topic_sessions.get(topic)
        if not holders:
            return
        for session in list(holders):
            if session.closed:
                continue
            effective = min(publish_qos, session.subscriptions.get(topic, 0))
            if effective == 0:
                session.send(Publish(topic=topic, payload=payload, qos=0))
            else:
                result = self._qos_step(
                    session, OutboundPublish(qos=effective, topic=topic, payload=payload)
                )
                if result[0] is None:
                    continue
                for action in result[1]:
                    session.send(action)
            self.stats["deliveries"] += 1
            self._event("deliver", client=session.client_id, topic=topic, qos=effective)


async def run_instance(
    host: str,
    port: int,
    bus_manifest: ClusterManifest | None,
    instance_index: int,
    keepalive_default: int,
) -> None:
    instance = BrokerInstance(
        host,
        port,
        bus_manifest,
        instance_index=instance_index,
        keepalive_default=keepalive_default,
    )
    await instance.start()
    try:
        await asyncio.Event().wait()
    finally:
        await instance.stop()
