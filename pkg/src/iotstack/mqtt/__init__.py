from .codec import (
    ConnAck,
    Connect,
    Disconnect,
    MqttError,
    Packet,
    PacketType,
    PingReq,
    PingResp,
    PubAck,
    PubComp,
    Publish,
    PubRec,
    PubRel,
    SubAck,
    Subscribe,
    UnsubAck,
    Unsubscribe,
    decode_packet,
    decode_remaining_length,
    encode_packet,
    encode_remaining_length,
    validate_topic,
)
from .qos import (
    AckTimeout,
    OutboundPublish,
    QosSessionState,
    Received,
    RetryLimitExceeded,
    qos_step,
)

__all__ = [
    "AckTimeout",
    "ConnAck",
    "Connect",
    "Disconnect",
    "MqttError",
    "OutboundPublish",
    "Packet",
    "PacketType",
    "PingReq",
    "PingResp",
    "PubAck",
    "PubComp",
    "PubRec",
    "PubRel",
    "Publish",
    "QosSessionState",
    "Received",
    "RetryLimitExceeded",
    "SubAck",
    "Subscribe",
    "UnsubAck",
    "Unsubscribe",
    "decode_packet",
    "decode_remaining_length",
    "encode_packet",
    "encode_remaining_length",
    "qos_step",
    "validate_topic",
]
