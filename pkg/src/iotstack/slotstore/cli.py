"""Command-line entry points: run a store node, administer a cluster."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys

from .client import NodeClient
from .manifest import load_manifest
from .node import run_node


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="slotstore", description="Run one store node")
    parser.add_argument("--config", required=True, help="cluster manifest (TOML)")
    parser.add_argument("--node", required=True, help="node id to run")
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    manifest = load_manifest(args.config)
    try:
        asyncio.run(run_node(manifest, args.node))
    except KeyboardInterrupt:
        pass
    return 0


async def _admin(args) -> int:
    manifest = load_manifest(args.config)

    async def try_connect():
        last = None
        for spec in manifest.nodes:
            try:
                return await NodeClient.connect(spec.address)
            except OSError as exc:
                last = exc
        raise SystemExit(f"no node reachable: {last}")

    if args.command == "slots":
        client = await try_connect()
        print(json.dumps(await client.slots(), indent=2))
        client.close()
    elif args.command == "stats":
        docs = []
        for spec in manifest.nodes:
            try:
                client = await NodeClient.connect(spec.address)
            except OSError:
                docs.append({"node": spec.node_id, "reachable": False})
                continue
            doc = await client.stats()
            doc["reachable"] = True
            docs.append(doc)
            client.close()
        print(json.dumps(docs, indent=2))
    elif args.command == "failover":
        failed = args.node_id
        notified = 0
        for spec in manifest.nodes:
            if spec.node_id == failed:
                continue
            try:
                client = await NodeClient.connect(spec.address)
            except OSError:
                continue
            await client.failover(failed)
            client.close()
            notified += 1
        print(f"failover of {failed} announced to {notified} nodes")
    return 0


def admin_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="slotstore-admin", description="Cluster administration")
    parser.add_argument("--config", required=True, help="cluster manifest (TOML)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("slots", help="print the slot map as one node sees it")
    sub.add_parser("stats", help="print per-node statistics")
    fo = sub.add_parser("failover", help="declare a node failed; promote its standby")
    fo.add_argument("node_id")
    args = parser.parse_args(argv)
    return asyncio.run(_admin(args))


if __name__ == "__main__":
    sys.exit(main())
