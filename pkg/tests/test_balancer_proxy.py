"""Balancer integration: byte transparency, least-conn splits, health, HTTP routing."""

import asyncio
import hashlib
import json
import random

from iotstack.balancer import Backend, Balancer, RouteRule
from iotstack.httpd import HttpService, MemoryStore

from conftest import free_port, free_ports


async def start_echo_server(port: int):
    async def handler(reader, writer):
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                writer.write(data)
                await writer.drain()
        except (OSError, ConnectionResetError):
            pass
        finally:
            writer.close()

    return await asyncio.start_server(handler, "127.0.0.1", port)


def make_backends(ports, weights=None, pools=None):
    return [
        Backend(
            backend_id=f"b{i}",
            host="127.0.0.1",
            port=port,
            weight=(weights or {}).get(i, 1),
            pool=(pools or {}).get(i, "default"),
            index=i,
        )
        for i, port in enumerate(ports)
    ]


def test_tcp_byte_transparency_checksummed(run):
    async def scenario():
        backend_port, listen_port = free_ports(2)
        echo = await start_echo_server(backend_port)
        balancer = Balancer("tcp", make_backends([backend_port]), check_interval=60.0)
        await balancer.start("127.0.0.1", listen_port)

        rng = random.Random(2)
        reader, writer = await asyncio.open_connection("127.0.0.1", listen_port)
        sent = hashlib.sha256()
        received = hashlib.sha256()
        total = 4 * 1024 * 1024

        async def produce():
            remaining = total
            while remaining:
                chunk = rng.randbytes(min(65536, remaining))
                sent.update(chunk)
                writer.write(chunk)
                await writer.drain()
                remaining -= len(chunk)
            writer.write_eof()

        async def consume():
            got = 0
            while got < total:
                data = await reader.read(65536)
                if not data:
                    break
                received.update(data)
                got += len(data)
            return got

        _, got = await asyncio.gather(produce(), consume())
        assert got == total
        assert sent.digest() == received.digest()
        writer.close()
        await balancer.close()
        echo.close()

    run(scenario())


def test_least_connections_split_of_long_lived_connections(run):
    async def scenario():
        p1, p2, listen_port = free_ports(3)
        echo1 = await start_echo_server(p1)
        echo2 = await start_echo_server(p2)
        backends = make_backends([p1, p2])
        balancer = Balancer("tcp", backends, check_interval=60.0)
        await balancer.start("127.0.0.1", listen_port)

        conns = []
        for _ in range(10):
            reader, writer = await asyncio.open_connection("127.0.0.1", listen_port)
            writer.write(b"ping")
            await writer.drain()
            assert await reader.read(4) == b"ping"  # connection established end-to-end
            conns.append((reader, writer))

        counts = sorted(b.active_connections for b in backends)
        assert counts == [5, 5]
        assert sum(b.active_connections for b in backends) == 10

        for reader, writer in conns:
            writer.close()
        await asyncio.sleep(0.2)
        assert sum(b.active_connections for b in backends) == 0  # drains to zero

        await balancer.close()
        echo1.close()
        echo2.close()

    run(scenario())


def test_tcp_retry_next_backend_on_connect_failure(run):
    async def scenario():
        dead_port, live_port, listen_port = free_ports(3)
        echo = await start_echo_server(live_port)
        backends = make_backends([dead_port, live_port])
        balancer = Balancer("tcp", backends, check_interval=60.0)
        await balancer.start("127.0.0.1", listen_port)

        reader, writer = await asyncio.open_connection("127.0.0.1", listen_port)
        writer.write(b"hello")
        await writer.drain()
        assert await reader.read(5) == b"hello"
        writer.close()

        await balancer.close()
        echo.close()

    run(scenario())


def test_health_checks_mark_down_and_up(run):
    async def scenario():
        backend_port, listen_port = free_ports(2)
        echo = await start_echo_server(backend_port)
        backends = make_backends([backend_port])
        balancer = Balancer("tcp", backends, check_interval=0.2)
        await balancer.start("127.0.0.1", listen_port)

        await asyncio.sleep(0.7)
        assert backends[0].healthy is True

        echo.close()
        await echo.wait_closed()
        await asyncio.sleep(1.0)  # two strikes at 0.2s interval plus margin
        assert backends[0].healthy is False

        echo = await start_echo_server(backend_port)
        await asyncio.sleep(1.0)
        assert backends[0].healthy is True

        await balancer.close()
        echo.close()

    run(scenario())


async def start_labelled_http_backend(port: int, label: str):
    store = MemoryStore()
    service = HttpService(store)
    await store.put("/", label.encode(), "text/plain")
    await store.put("/api/thing", f"{label}-api".encode(), "text/plain")
    server = await service.serve("127.0.0.1", port)
    return server


async def http_get(port: int, path: str, keep_writer=None):
    reader, writer = await asyncio.open_connection("127.0.0.1", port)
    writer.write(f"GET {path} HTTP/1.1\r\nHost: a\r\nConnection: close\r\n\r\n".encode())
    await writer.drain()
    raw = b""
    while True:
        data = await reader.read(65536)
        if not data:
            break
        raw += data
    writer.close()
    head, _, body = raw.partition(b"\r\n\r\n")
    status = int(head.split(b" ", 2)[1])
    return status, body


def test_http_routing_rules_and_wrr_sequence(run):
    async def scenario():
        pa1, pa2, pb, listen_port = free_ports(4)
        servers = [
            await start_labelled_http_backend(pa1, "A"),
            await start_labelled_http_backend(pa2, "B"),
            await start_labelled_http_backend(pb, "API"),
        ]
        backends = [
            Backend("A", "127.0.0.1", pa1, weight=2, pool="web", index=0),
            Backend("B", "127.0.0.1", pa2, weight=1, pool="web", index=1),
            Backend("API", "127.0.0.1", pb, weight=1, pool="api", index=2),
        ]
        rules = [RouteRule("/api", "api"), RouteRule("/", "web")]
        balancer = Balancer("http", backends, rules, check_interval=60.0)
        await balancer.start("127.0.0.1", listen_port)

        # /api prefix routes to the api pool
        status, body = await http_get(listen_port, "/api/thing")
        assert status == 200 and body == b"API-api"

        # catch-all pool follows the smooth WRR A,B,A cycle
        sequence = []
        for _ in range(6):
            status, body = await http_get(listen_port, "/")
            assert status == 200
            sequence.append(body.decode())
        assert sequence == ["A", "B", "A", "A", "B", "A"]

        await balancer.close()
        for server in servers:
            server.close()

    run(scenario())


def test_http_keepalive_connection_balances_each_request(run):
    async def scenario():
        pa1, pa2, listen_port = free_ports(3)
        servers = [
            await start_labelled_http_backend(pa1, "A"),
            await start_labelled_http_backend(pa2, "B"),
        ]
        backends = [
            Backend("A", "127.0.0.1", pa1, weight=1, pool="default", index=0),
            Backend("B", "127.0.0.1", pa2, weight=1, pool="default", index=1),
        ]
        balancer = Balancer("http", backends, [RouteRule("/", "default")], check_interval=60.0)
        await balancer.start("127.0.0.1", listen_port)

        reader, writer = await asyncio.open_connection("127.0.0.1", listen_port)
        labels = []
        for i in range(4):
            writer.write(b"GET / HTTP/1.1\r\nHost: a\r\n\r\n")
            await writer.drain()
            buf = b""
            while b"\r\n\r\n" not in buf:
                buf += await reader.read(65536)
            head, _, rest = buf.partition(b"\r\n\r\n")
            length = int(
                next(
                    line.split(b":")[1]
                    for line in head.split(b"\r\n")
                    if line.lower().startswith(b"content-length")
                )
            )
            while len(rest) < length:
                rest += await reader.read(65536)
            labels.append(rest[:length].decode())
        writer.close()
        assert labels == ["A", "B", "A", "B"]  # alternates across one connection

        await balancer.close()
        for server in servers:
            server.close()

    run(scenario())


def test_http_no_backend_503_and_bad_request_400(run):
    async def scenario():
        dead_port, listen_port = free_ports(2)
        backends = make_backends([dead_port])
        backends[0].healthy = False
        balancer = Balancer("http", backends, [RouteRule("/", "default")], check_interval=60.0)
        await balancer.start("127.0.0.1", listen_port)

        status, _ = await http_get(listen_port, "/x")
        assert status == 503

        reader, writer = await asyncio.open_connection("127.0.0.1", listen_port)
        writer.write(b"garbage\r\n\r\n")
        await writer.drain()
        raw = await reader.read(65536)
        assert raw.startswith(b"HTTP/1.1 400")
        writer.close()

        await balancer.close()

    run(scenario())


def test_stats_surfaces(run):
    async def scenario():
        backend_port, listen_port, stats_port = free_ports(3)
        echo = await start_echo_server(backend_port)
        balancer = Balancer("tcp", make_backends([backend_port]), check_interval=60.0)
        await balancer.start("127.0.0.1", listen_port, stats_addr=("127.0.0.1", stats_port))

        reader, writer = await asyncio.open_connection("127.0.0.1", listen_port)
        writer.write(b"x")
        await writer.drain()
        await reader.read(1)

        # TCP admin socket: JSON on connect
        sreader, swriter = await asyncio.open_connection("127.0.0.1", stats_port)
        doc = json.loads(await sreader.readline())
        assert doc["mode"] == "tcp"
        assert doc["backends"][0]["active_connections"] == 1
        assert doc["totals"]["connections"] == 1
        swriter.close()
        writer.close()

        await balancer.close()
        echo.close()

    run(scenario())
