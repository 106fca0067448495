"""Asyncio MQTT client for the load harness and integration tests.

Runs the same codec and QoS state machine as the broker: QoS 1/2 publishes
are retransmitted with dup=1 on ack timeout, inbound QoS 2 is deduplicated,
and inbound QoS 1/2 is acked automatically.
"""

from __future__ import annotations

import asyncio
import time
from typing import Awaitable, Callable

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

MessageCallback = Callable[[str, bytes, int], "Awaitable[None] | None"]

CONNECT_TIMEOUT = 10.0


class MqttClientError(Exception):
    pass


class MqttClient:
    def __init__(
        self,
        reader: asyncio.StreamReader,
        writer: asyncio.StreamWriter,
        on_message: MessageCallback | None = None,
        ack_timeout: float = 5.0,
    ):
        self._reader = reader
        self._writer = writer
        self._on_message = on_message
        self._ack_timeout = ack_timeout
        self.qos_state = QosSessionState()
        self._timers: dict[int, asyncio.TimerHandle] = {}
        self._connack: asyncio.Future = asyncio.get_running_loop().create_future()
        self._suback: dict[int, asyncio.Future] = {}
        self._unsuback: dict[int, asyncio.Future] = {}
        self._completion: dict[int, asyncio.Future] = {}
        self._ping_waiters: list[asyncio.Future] = []
        self._ctl_packet_id = 0
        self.closed = False
        self.messages_received = 0
        self._read_task = asyncio.create_task(self._read_loop())

    # -- connection -----------------------------------------------------------

    @classmethod
    async def connect(
        cls,
        host: str,
        port: int,
        client_id: str,
        *,
        keep_alive: int = 60,
        on_message: MessageCallback | None = None,
        ack_timeout: float = 5.0,
        auto_ping: bool = True,
    ) -> "MqttClient":
        reader, writer = await asyncio.open_connection(host, port)
        client = cls(reader, writer, on_message, ack_timeout)
        writer.write(encode_packet(Connect(client_id=client_id, keep_alive=keep_alive)))
        ack = await asyncio.wait_for(client._connack, CONNECT_TIMEOUT)
        if ack.return_code != 0:
            client.close()
            raise MqttClientError(f"connect refused with return code {ack.return_code}")
        if auto_ping and keep_alive > 0:
            client._pinger = asyncio.create_task(client._ping_loop(keep_alive / 2))
        return client

    async def _ping_loop(self, interval: float) -> None:
        while not self.closed:
            await asyncio.sleep(interval)
            if self.closed:
                return
            try:
                self._send(PingReq())
            except OSError:
                return

    def _send(self, packet: Packet) -> None:
        if self.closed or self._writer.is_closing():
            raise OSError("connection closed")
        self._writer.write(encode_packet(packet))

    def _next_ctl_packet_id(self) -> int:
        self._ctl_packet_id = self._ctl_packet_id % 0xFFFF + 1
        return self._ctl_packet_id

    # -- inbound ---------------------------------------------------------------

    async def _read_loop(self) -> None:
        buf = bytearray()
        try:
            while True:
                data = await self._reader.read(65536)
                if not data:
                    break
                buf += data
                while True:
                    decoded = decode_packet(bytes(buf))
                    if decoded is None:
                        break
                    packet, consumed = decoded
                    del buf[:consumed]
                    await self._handle(packet)
        except (OSError, MqttError, ConnectionResetError):
            pass
        finally:
            self._shutdown()

    async def _handle(self, packet: Packet) -> None:
        if isinstance(packet, ConnAck):
            if not self._connack.done():
                self._connack.set_result(packet)
            return
        if isinstance(packet, SubAck):
            fut = self._suback.pop(packet.packet_id, None)
            if fut is not None and not fut.done():
                fut.set_result(packet)
            return
        if isinstance(packet, UnsubAck):
            fut = self._unsuback.pop(packet.packet_id, None)
            if fut is not None and not fut.done():
                fut.set_result(packet)
            return
        if isinstance(packet, PingResp):
            for fut in self._ping_waiters:
                if not fut.done():
                    fut.set_result(None)
            self._ping_waiters.clear()
            return
        if isinstance(packet, (Publish, PubAck, PubRec, PubRel, PubComp)):
            try:
                new_state, actions, deliveries = qos_step(self.qos_state, Received(packet))
            except RetryLimitExceeded:
                self._shutdown()
                return
            before = set(self.qos_state.outbound)
            self.qos_state = new_state
            self._reconcile_timers()
            self._resolve_completions(before)
            for action in actions:
                self._send(action)
            for publish in deliveries:
                self.messages_received += 1
                if self._on_message is not None:
                    result = self._on_message(publish.topic, publish.payload, publish.qos)
                    if asyncio.iscoroutine(result):
                        await result

    def _resolve_completions(self, before: set[int]) -> None:
        done = before - set(self.qos_state.outbound)
        for pid in done:
            fut = self._completion.pop(pid, None)
            if fut is not None and not fut.done():
                fut.set_result(None)

    # -- timers ------------------------------------------------------------------

    def _reconcile_timers(self) -> None:
        pending = set(self.qos_state.outbound)
        for pid in list(self._timers):
            if pid not in pending:
                self._timers.pop(pid).cancel()
        loop = asyncio.get_running_loop()
        for pid in pending:
            if pid not in self._timers:
                self._timers[pid] = loop.call_later(self._ack_timeout, self._on_timeout, pid)

    def _on_timeout(self, packet_id: int) -> None:
        self._timers.pop(packet_id, None)
        if self.closed:
            return
        try:
            new_state, actions, _ = qos_step(self.qos_state, AckTimeout(packet_id=packet_id))
        except RetryLimitExceeded:
            fut = self._completion.pop(packet_id, None)
            if fut is not None and not fut.done():
                fut.set_exception(MqttClientError("retry limit exceeded"))
            self._shutdown()
            return
        self.qos_state = new_state
        self._reconcile_timers()
        try:
            for action in actions:
                self._send(action)
        except OSError:
            pass

    # -- outbound ------------------------------------------------------------------

    async def subscribe(self, topic: str, qos: int = 0, timeout: float = 10.0) -> int:
        pid = self._next_ctl_packet_id()
        fut: asyncio.Future = asyncio.get_running_loop().create_future()
        self._suback[pid] = fut
        self._send(Subscribe(packet_id=pid, topics=((topic, qos),)))
        suback = await asyncio.wait_for(fut, timeout)
        granted = suback.return_codes[0]
        if granted == 0x80:
            raise MqttClientError(f"subscription to {topic!r} rejected")
        return granted

    async def unsubscribe(self, topic: str, timeout: float = 10.0) -> None:
        pid = self._next_ctl_packet_id()
        fut: asyncio.Future = asyncio.get_running_loop().create_future()
        self._unsuback[pid] = fut
        self._send(Unsubscribe(packet_id=pid, topics=(topic,)))
        await asyncio.wait_for(fut, timeout)

    def publish(self, topic: str, payload: bytes, qos: int = 0) -> asyncio.Future | None:
        """Send a publish. For QoS >= 1 returns a future resolved when the
        handshake completes (PUBACK or PUBCOMP); QoS 0 returns None."""
        new_state, actions, _ = qos_step(
            self.qos_state, OutboundPublish(qos=qos, topic=topic, payload=payload)
        )
        self.qos_state = new_state
        completion = None
        if qos > 0:
            pid = actions[0].packet_id
            completion = asyncio.get_running_loop().create_future()
            self._completion[pid] = completion
        self._reconcile_timers()
        for action in actions:
            self._send(action)
        return completion

    async def ping(self, timeout: float = 10.0) -> None:
        fut: asyncio.Future = asyncio.get_running_loop().create_future()
        self._ping_waiters.append(fut)
        self._send(PingReq())
        await asyncio.wait_for(fut, timeout)

    def disconnect(self) -> None:
        try:
            self._send(Disconnect())
        except OSError:
            pass
        self.close()

    # -- teardown ---------------------------------------------------------------

    def _shutdown(self) -> None:
        self.closed = True
        for timer in self._timers.values():
            timer.cancel()
        self._timers.clear()
        for fut in list(self._completion.values()) + list(self._suback.values()) + list(
            self._unsuback.values()
        ) + self._ping_waiters:
            if not fut.done():
                fut.set_exception(MqttClientError("connection closed"))
        self._completion.clear()
        self._suback.clear()
        self._unsuback.clear()
        self._ping_waiters.clear()
        if not self._connack.done():
            self._connack.set_exception(MqttClientError("connection closed"))
        self._writer.close()

    def close(self) -> None:
        if not self.closed:
            self._shutdown()
        self._read_task.cancel()
        pinger = getattr(self, "_pinger", None)
        if pinger is not None:
            pinger.cancel()


def now_us() -> int:
    return time.perf_counter_ns() // 1000
