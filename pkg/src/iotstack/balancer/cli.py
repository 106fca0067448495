"""balancer entry point."""

from __future__ import annotations

import argparse
import asyncio
import logging
import re
import sys

from .policy import Backend, RouteRule
from .proxy import Balancer


def parse_duration(text: str) -> float:
    m = re.fullmatch(r"(\d+(?:\.\d+)?)(ms|s)?", text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad duration {text!r}")
    value = float(m.group(1))
    return value / 1000 if m.group(2) == "ms" else value


def parse_backend(spec: str, index: int) -> Backend:
    """host:port[:weight][@pool]"""
    pool = "default"
    if "@" in spec:
        spec, pool = spec.rsplit("@", 1)
    parts = spec.split(":")
    if len(parts) == 2:
        host, port, weight = parts[0], int(parts[1]), 1
    elif len(parts) == 3:
        host, port, weight = parts[0], int(parts[1]), int(parts[2])
    else:
        raise argparse.ArgumentTypeError(f"bad backend {spec!r}")
    if weight < 1:
        raise argparse.ArgumentTypeError("weight must be positive")
    return Backend(
        backend_id=f"b{index}", host=host, port=port, weight=weight, pool=pool, index=index
    )


def parse_rule(spec: str) -> RouteRule:
    if "=" not in spec:
        raise argparse.ArgumentTypeError(f"bad rule {spec!r}, expected prefix=pool")
    prefix, pool = spec.split("=", 1)
    return RouteRule(path_prefix=prefix, pool_name=pool)


def parse_listen(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="balancer", description="TCP/HTTP load balancer")
    parser.add_argument("--mode", choices=["http", "tcp"], required=True)
    parser.add_argument("--listen", default="127.0.0.1:9000")
    parser.add_argument(
        "--backend",
        action="append",
        required=True,
        metavar="HOST:PORT[:WEIGHT][@POOL]",
        help="repeatable; weight defaults to 1, pool to 'default'",
    )
    parser.add_argument(
        "--rule",
        action="append",
        default=[],
        metavar="PREFIX=POOL",
        help="HTTP mode path-prefix routing; a catch-all / rule is added if missing",
    )
    parser.add_argument("--check-interval", type=parse_duration, default=2.0)
    parser.add_argument("--stats", default=None, help="host:port for the stats endpoint / admin socket")
    parser.add_argument("--health-path", default="/health")
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )

    backends = [parse_backend(spec, i) for i, spec in enumerate(args.backend)]
    rules = [parse_rule(spec) for spec in args.rule]
    if args.mode == "http" and not any(r.path_prefix == "/" for r in rules):
        rules.append(RouteRule("/", backends[0].pool))

    host, port = parse_listen(args.listen)
    stats_addr = parse_listen(args.stats) if args.stats else None

    async def amain():
        balancer = Balancer(
            args.mode,
            backends,
            rules or None,
            check_interval=args.check_interval,
            health_path=args.health_path,
        )
        await balancer.start(host, port, stats_addr)
        await asyncio.Event().wait()

    try:
        asyncio.run(amain())
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
