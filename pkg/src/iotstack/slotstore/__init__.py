from .client import ClusterClient, NodeClient, RoutingError, StoreError
from .hashslot import SLOT_COUNT, SlotMap, crc16, equal_intervals, hash_slot, route
from .manifest import ClusterManifest, NodeSpec, load_manifest, parse_manifest
from .node import StoreNode
from .txlog import CorruptLogError, LogRecord, LogWriter, read_log, replay_log

__all__ = [
    "SLOT_COUNT",
    "ClusterClient",
    "ClusterManifest",
    "CorruptLogError",
    "LogRecord",
    "LogWriter",
    "NodeClient",
    "NodeSpec",
    "RoutingError",
    "SlotMap",
    "StoreError",
    "StoreNode",
    "crc16",
    "equal_intervals",
    "hash_slot",
    "load_manifest",
    "parse_manifest",
    "read_log",
    "replay_log",
    "route",
]
