"""httpd entry point."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys

from ..slotstore import ClusterClient, load_manifest
from .resources import MemoryStore, SlotBackedStore
from .server import run_httpd


def parse_listen(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="httpd", description="GET/POST/DELETE resource server")
    parser.add_argument("--listen", default="127.0.0.1:8080", help="host:port")
    parser.add_argument(
        "--store",
        default="memory",
        help="'memory' or 'slot:<manifest.toml>' to keep resources in the store cluster",
    )
    parser.add_argument("--health-path", default="/health")
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    host, port = parse_listen(args.listen)

    async def amain():
        if args.store == "memory":
            store = MemoryStore()
        elif args.store.startswith("slot:"):
            manifest = load_manifest(args.store.split(":", 1)[1])
            store = SlotBackedStore(ClusterClient(manifest))
        else:
            parser.error(f"unknown store {args.store!r}")
            return
        await run_httpd(host, port, store, health_path=args.health_path)

    try:
        asyncio.run(amain())
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
