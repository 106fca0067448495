"""Cluster manifest: TOML file naming every node, its address, slot interval,
standby pairing, and the replication mode.

Example::

    replication = "async"   # or "strict"

    [[node]]
    id = "n1"
    listen = "127.0.0.1:7101"
    slots = [0, 8191]        # optional; equal split over primaries if omitted
    log = "/tmp/n1.log"

    [[node]]
    id = "n1b"
    listen = "127.0.0.1:7111"
    standby_of = "n1"
    log = "/tmp/n1b.log"
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .hashslot import SLOT_COUNT, SlotMap, equal_intervals


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    address: str  # host:port
    slots: tuple[int, int] | None = None
    standby_of: str | None = None
    log_path: str | None = None

    @property
    def is_standby(self) -> bool:
        return self.standby_of is not None

    @property
    def host(self) -> str:
        return self.address.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.address.rsplit(":", 1)[1])


@dataclass(frozen=True)
class ClusterManifest:
    nodes: tuple[NodeSpec, ...]
    replication: str = "async"  # "async" | "strict"
    _slot_map: SlotMap = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.replication not in ("async", "strict"):
            raise ManifestError(f"replication must be async or strict, got {self.replication!r}")
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate node ids in manifest")
        primaries = self.primaries()
        if not primaries:
            raise ManifestError("manifest needs at least one primary node")
        for n in self.nodes:
            if n.standby_of is not None:
                if n.standby_of not in {p.node_id for p in primaries}:
                    raise ManifestError(
                        f"{n.node_id} is standby of unknown primary {n.standby_of!r}"
                    )
                if n.slots is not None:
                    raise ManifestError(f"standby {n.node_id} must not declare slots")
        explicit = [p for p in primaries if p.slots is not None]
        if explicit and len(explicit) != len(primaries):
            raise ManifestError("either all primaries declare slots or none do")
        if explicit:
            slot_map = SlotMap([(p.slots[0], p.slots[1], p.node_id) for p in primaries])
        else:
            slot_map = equal_intervals([p.node_id for p in primaries])
        object.__setattr__(self, "_slot_map", slot_map)

    def primaries(self) -> list[NodeSpec]:
        return [n for n in self.nodes if not n.is_standby]

    def slot_map(self) -> SlotMap:
        return self._slot_map

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise ManifestError(f"no node {node_id!r} in manifest")

    def standby_for(self, node_id: str) -> NodeSpec | None:
        for n in self.nodes:
            if n.standby_of == node_id:
                return n
        return None

    def address_of(self, node_id: str) -> str:
        return self.node(node_id).address


def parse_manifest(text: str) -> ClusterManifest:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ManifestError(f"invalid TOML: {exc}") from None

    raw_nodes = doc.get("node")
    if not raw_nodes:
        raise ManifestError("manifest has no [[node]] entries")

    nodes = []
    for raw in raw_nodes:
        try:
            node_id = raw["id"]
            address = raw["listen"]
        except KeyError as exc:
            raise ManifestError(f"node entry missing {exc}") from None
        slots = raw.get("slots")
        if slots is not None:
            if len(slots) != 2 or not all(isinstance(s, int) for s in slots):
                raise ManifestError(f"node {node_id}: slots must be [lo, hi]")
            lo, hi = slots
            if not (0 <= lo <= hi < SLOT_COUNT):
                raise ManifestError(f"node {node_id}: slots out of range")
            slots = (lo, hi)
        nodes.append(
            NodeSpec(
                node_id=node_id,
                address=address,
                slots=slots,
                standby_of=raw.get("standby_of"),
                log_path=raw.get("log"),
            )
        )
    return ClusterManifest(
        nodes=tuple(nodes), replication=doc.get("replication", "async")
    )


def load_manifest(path: str) -> ClusterManifest:
    with open(path, "r", encoding="utf-8") as f:
        return parse_manifest(f.read())
