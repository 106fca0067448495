"""broker entry point: master mode spawns and supervises slaves; slave mode
(--instance-index) runs one instance on base port + index."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys

from ..slotstore import load_manifest
from .cluster import Supervisor, pin_to_core
from .server import BrokerInstance


def parse_listen(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="broker", description="MQTT-subset broker")
    parser.add_argument("--listen", default="127.0.0.1:1883", help="base host:port")
    parser.add_argument("--instances", type=int, default=1)
    parser.add_argument("--bus", default=None, help="store cluster manifest (TOML); enables cross-instance delivery")
    parser.add_argument("--keepalive-default", type=int, default=60)
    parser.add_argument(
        "--instance-index",
        type=int,
        default=None,
        help=argparse.SUPPRESS,  # internal: set when spawned as a slave
    )
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(message)s",
        stream=sys.stdout,
    )
    host, base_port = parse_listen(args.listen)
    manifest = load_manifest(args.bus) if args.bus else None

    async def run_slave(index: int):
        instance = BrokerInstance(
            host,
            base_port + index,
            manifest,
            instance_index=index,
            keepalive_default=args.keepalive_default,
        )
        await instance.start()
        await asyncio.Event().wait()

    async def run_master():
        pin_to_core(0, 0)
        instance = BrokerInstance(
            host,
            base_port,
            manifest,
            instance_index=0,
            keepalive_default=args.keepalive_default,
        )
        await instance.start()
        supervisor = Supervisor(
            host, base_port, args.instances, args.bus, args.keepalive_default
        )
        await supervisor.start()
        try:
            await asyncio.Event().wait()
        finally:
            await supervisor.stop()
            await instance.stop()

    try:
        if args.instance_index is not None:
            asyncio.run(run_slave(args.instance_index))
        else:
            asyncio.run(run_master())
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
