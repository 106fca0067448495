"""Shared helpers: port allocation, manifest scaffolding, in-process clusters."""

import asyncio
import socket
import textwrap

import pytest

from iotstack.slotstore import StoreNode, parse_manifest


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def free_ports(n: int) -> list[int]:
    # Hold all sockets open until every port is picked so they are distinct.
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind(("127.0.0.1", 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def make_manifest_text(
    primaries: int,
    tmp_path,
    *,
    standbys: dict[str, str] | None = None,
    replication: str = "async",
    ports: list[int] | None = None,
) -> str:
    """TOML manifest for ``primaries`` nodes n1..nN plus optional standbys.

    ``standbys`` maps standby id -> primary id.
    """
    standbys = standbys or {}
    ports = ports or free_ports(primaries + len(standbys))
    lines = [f'replication = "{replication}"', ""]
    i = 0
    for p in range(1, primaries + 1):
        lines.append(
            textwrap.dedent(
                f"""\
                [[node]]
                id = "n{p}"
                listen = "127.0.0.1:{ports[i]}"
                log = "{tmp_path}/n{p}.log"
                """
            )
        )
        i += 1
    for sid, primary in standbys.items():
        lines.append(
            textwrap.dedent(
                f"""\
                [[node]]
                id = "{sid}"
                listen = "127.0.0.1:{ports[i]}"
                standby_of = "{primary}"
                log = "{tmp_path}/{sid}.log"
                """
            )
        )
        i += 1
    return "\n".join(lines)


class InProcessCluster:
    """All manifest nodes running on the current event loop."""

    def __init__(self, manifest):
        self.manifest = manifest
        self.nodes: dict[str, StoreNode] = {}

    async def start(self, ping_interval: float = 0.2):
        for spec in self.manifest.nodes:
            node = StoreNode(self.manifest, spec.node_id, ping_interval=ping_interval)
            await node.start()
            self.nodes[spec.node_id] = node
        # wait for the full mesh to come up
        deadline = asyncio.get_running_loop().time() + 5.0
        while asyncio.get_running_loop().time() < deadline:
            if all(
                link.connected
                for node in self.nodes.values()
                for link in node.peers.values()
            ):
                return self
            await asyncio.sleep(0.02)
        raise TimeoutError("cluster mesh did not form")

    async def stop(self):
        for node in self.nodes.values():
            await node.stop()

    async def kill(self, node_id: str):
        await self.nodes[node_id].stop()
        del self.nodes[node_id]


@pytest.fixture
def run():
    """Run a coroutine to completion on a fresh loop (keeps tests sync)."""

    def _run(coro):
        return asyncio.run(coro)

    return _run


def start_cluster(manifest_text: str, ping_interval: float = 0.2):
    manifest = parse_manifest(manifest_text)
    cluster = InProcessCluster(manifest)
    return manifest, cluster
