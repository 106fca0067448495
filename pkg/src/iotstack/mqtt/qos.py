"""Per-session QoS handshake state machine.

``qos_step`` is a pure function: it never mutates the input state and returns
a new one, so connection handlers can own independent sessions and tests can
enumerate event interleavings exhaustively.

QoS 0 publishes pass straight through. QoS 1 holds outbound publishes until
PUBACK and redelivers with dup=1 on timeout. QoS 2 runs the four-way
PUBLISH/PUBREC/PUBREL/PUBCOMP exchange; an inbound publish is handed upward
on first receipt and its packet id parked until PUBREL so retransmissions are
suppressed. Unsolicited acks are counted, not fatal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import Mapping, Union

from .codec import Packet, PubAck, PubComp, PubRec, PubRel, Publish

MAX_PACKET_ID = 0xFFFF
DEFAULT_ACK_TIMEOUT = 5.0
DEFAULT_RETRY_LIMIT = 3


class RetryLimitExceeded(Exception):
    """A pending exchange ran out of retransmissions; tear the session down."""

    def __init__(self, packet_id: int):
        super().__init__(f"packet id {packet_id} exceeded the retransmission limit")
        self.packet_id = packet_id


class OutboundStage(Enum):
    AWAIT_PUBACK = "await_puback"
    AWAIT_PUBREC = "await_pubrec"
    AWAIT_PUBCOMP = "await_pubcomp"


@dataclass(frozen=True)
class PendingOutbound:
    stage: OutboundStage
    publish: Publish
    retries: int = 0


@dataclass(frozen=True)
class QosSessionState:
    outbound: Mapping[int, PendingOutbound] = field(
        default_factory=lambda: MappingProxyType({})
    )
    inbound: frozenset[int] = frozenset()  # ids awaiting PUBREL
    next_packet_id: int = 1
    unexpected_acks: int = 0


@dataclass(frozen=True)
class OutboundPublish:
    """Application asks to publish at the given QoS."""

    qos: int
    topic: str
    payload: bytes = b""


@dataclass(frozen=True)
class Received:
    packet: Packet


@dataclass(frozen=True)
class AckTimeout:
    packet_id: int


Event = Union[OutboundPublish, Received, AckTimeout]


def _freeze(d: dict[int, PendingOutbound]) -> Mapping[int, PendingOutbound]:
    return MappingProxyType(d)


def allocate_packet_id(state: QosSessionState) -> tuple[int, int]:
    """Pick the next free outbound packet id, skipping ids still pending.

    Returns (allocated id, next candidate). Raises MqttError-ish RuntimeError
    if all 65535 ids are in flight (cannot happen under sane retry limits).
    """
    pid = state.next_packet_id
    for _ in range(MAX_PACKET_ID):
        if pid not in state.outbound:
            return pid, pid % MAX_PACKET_ID + 1
        pid = pid % MAX_PACKET_ID + 1
    raise RuntimeError("no free packet ids")


def qos_step(
    state: QosSessionState,
    event: Event,
    *,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
) -> tuple[QosSessionState, list[Packet], list[Publish]]:
    """Advance the session by one event.

    Returns (new state, packets to transmit, publishes to hand upward).
    """
    if isinstance(event, OutboundPublish):
        return _step_outbound(state, event)
    if isinstance(event, Received):
        return _step_received(state, event.packet)
    if isinstance(event, AckTimeout):
        return _step_timeout(state, event.packet_id, retry_limit)
    raise TypeError(f"unknown event {event!r}")


def _step_outbound(
    state: QosSessionState, event: OutboundPublish
) -> tuple[QosSessionState, list[Packet], list[Publish]]:
    if event.qos == 0:
        return state, [Publish(topic=event.topic, payload=event.payload, qos=0)], []
    pid, nxt = allocate_packet_id(state)
    publish = Publish(
        topic=event.topic, payload=event.payload, qos=event.qos, packet_id=pid
    )
    stage = (
        OutboundStage.AWAIT_PUBACK if event.qos == 1 else OutboundStage.AWAIT_PUBREC
    )
    outbound = dict(state.outbound)
    outbound[pid] = PendingOutbound(stage=stage, publish=publish)
    new = replace(state, outbound=_freeze(outbound), next_packet_id=nxt)
    return new, [publish], []


def _step_received(
    state: QosSessionState, packet: Packet
) -> tuple[QosSessionState, list[Packet], list[Publish]]:
    if isinstance(packet, Publish):
        return _step_received_publish(state, packet)

    if isinstance(packet, PubAck):
        pending = state.outbound.get(packet.packet_id)
        if pending is None or pending.stage != OutboundStage.AWAIT_PUBACK:
            return replace(state, unexpected_acks=state.unexpected_acks + 1), [], []
        outbound = dict(state.outbound)
        del outbound[packet.packet_id]
        return replace(state, outbound=_freeze(outbound)), [], []

    if isinstance(packet, PubRec):
        pending = state.outbound.get(packet.packet_id)
        if pending is None:
            return replace(state, unexpected_acks=state.unexpected_acks + 1), [], []
        if pending.stage == OutboundStage.AWAIT_PUBCOMP:
            # Duplicate PUBREC: repeat the PUBREL, no state change.
            return state, [PubRel(packet_id=packet.packet_id)], []
        if pending.stage != OutboundStage.AWAIT_PUBREC:
            return replace(state, unexpected_acks=state.unexpected_acks + 1), [], []
        outbound = dict(state.outbound)
        outbound[packet.packet_id] = PendingOutbound(
            stage=OutboundStage.AWAIT_PUBCOMP, publish=pending.publish
        )
        new = replace(state, outbound=_freeze(outbound))
        return new, [PubRel(packet_id=packet.packet_id)], []

    if isinstance(packet, PubComp):
        pending = state.outbound.get(packet.packet_id)
        if pending is None or pending.stage != OutboundStage.AWAIT_PUBCOMP:
            return replace(state, unexpected_acks=state.unexpected_acks + 1), [], []
        outbound = dict(state.outbound)
        del outbound[packet.packet_id]
        return replace(state, outbound=_freeze(outbound)), [], []

    if isinstance(packet, PubRel):
        if packet.packet_id in state.inbound:
            new = replace(state, inbound=state.inbound - {packet.packet_id})
            return new, [PubComp(packet_id=packet.packet_id)], []
        # PUBREL for an id we are not holding: answer anyway, count it.
        new = replace(state, unexpected_acks=state.unexpected_acks + 1)
        return new, [PubComp(packet_id=packet.packet_id)], []

    raise TypeError(f"qos_step cannot consume {type(packet).__name__}")


def _step_received_publish(
    state: QosSessionState, publish: Publish
) -> tuple[QosSessionState, list[Packet], list[Publish]]:
    if publish.qos == 0:
        return state, [], [publish]
    if publish.qos == 1:
        # At-least-once: every receipt (dup or not) is delivered and acked.
        return state, [PubAck(packet_id=publish.packet_id)], [publish]
    # QoS 2
    pid = publish.packet_id
    if pid in state.inbound:
        # Retransmission while awaiting PUBREL: repeat the ack, suppress delivery.
        return state, [PubRec(packet_id=pid)], []
    new = replace(state, inbound=state.inbound | {pid})
    return new, [PubRec(packet_id=pid)], [publish]


def _step_timeout(
    state: QosSessionState, packet_id: int, retry_limit: int
) -> tuple[QosSessionState, list[Packet], list[Publish]]:
    pending = state.outbound.get(packet_id)
    if pending is None:
        # Timer raced with the ack; nothing to do.
        return state, [], []
    if pending.retries >= retry_limit:
        raise RetryLimitExceeded(packet_id)
    outbound = dict(state.outbound)
    outbound[packet_id] = replace(pending, retries=pending.retries + 1)
    new = replace(state, outbound=_freeze(outbound))
    if pending.stage == OutboundStage.AWAIT_PUBCOMP:
        return new, [PubRel(packet_id=packet_id)], []
    return new, [replace(pending.publish, dup=True)], []
