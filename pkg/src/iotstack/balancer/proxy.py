"""Front-end load balancer.

TCP mode pins each client connection to the least-connected healthy backend
and splices bytes both ways (user-space realization of destination rewriting).
HTTP mode parses each request, picks a backend by route rule + smooth WRR,
and relays the response; every request is balanced independently even on a
keep-alive client connection.

Backend selection and counter updates happen synchronously on the event loop,
so selection is atomic with the increment; relaying proceeds concurrently.
"""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import time

from ..httpd.http1 import (
    BadRequest,
    HttpRequest,
    parse_request_head,
    parse_response_head,
    serialize_request,
    serialize_response,
    simple_response,
)
from .policy import Backend, NoBackendError, RouteRule, WrrState, least_conn_next, match_rule, wrr_next

log = logging.getLogger("balancer")

CHECK_INTERVAL = 2.0
HEALTH_STRIKES = 2
CONNECT_TIMEOUT = 5.0
SPLICE_CHUNK = 65536


class Balancer:
    def __init__(
        self,
        mode: str,
        backends: list[Backend],
        rules: list[RouteRule] | None = None,
        *,
        check_interval: float = CHECK_INTERVAL,
        health_path: str = "/health",
    ):
        if mode not in ("tcp", "http"):
            raise ValueError(f"mode must be tcp or http, got {mode!r}")
        self.mode = mode
        self.backends = backends
        self.pools: dict[str, list[Backend]] = {}
        for backend in backends:
            self.pools.setdefault(backend.pool, []).append(backend)
        self.rules = rules or [RouteRule("/", "default")]
        if mode == "http":
            if not any(r.path_prefix == "/" for r in self.rules):
                raise ValueError('HTTP rules must include a catch-all "/" rule')
            for rule in self.rules:
                if rule.pool_name not in self.pools:
                    raise ValueError(f"rule {rule.path_prefix!r} names unknown pool {rule.pool_name!r}")
        self._wrr: dict[str, WrrState] = {name: WrrState() for name in self.pools}
        self.check_interval = check_interval
        self.health_path = health_path
        self.totals = {"connections": 0, "requests": 0, "refused": 0, "backend_errors": 0}
        self._server: asyncio.AbstractServer | None = None
        self._stats_server: asyncio.AbstractServer | None = None
        self._health_tasks: list[asyncio.Task] = []

    # -- lifecycle -------------------------------------------------------------

    async def start(self, host: str, port: int, stats_addr: tuple[str, int] | None = None) -> None:
        handler = self._handle_tcp if self.mode == "tcp" else self._handle_http
        self._server = await asyncio.start_server(handler, host, port)
        for backend in self.backends:
            self._health_tasks.append(asyncio.create_task(self._health_loop(backend)))
        if stats_addr is not None:
            stats_handler = (
                self._handle_stats_socket if self.mode == "tcp" else self._handle_stats_http
            )
            self._stats_server = await asyncio.start_server(stats_handler, *stats_addr)
        log.info("balancer (%s) listening on %s:%d", self.mode, host, port)

    async def close(self) -> None:
        for task in self._health_tasks:
            task.cancel()
        for server in (self._server, self._stats_server):
            if server is not None:
                server.close()
                await server.wait_closed()

    # -- health checking -------------------------------------------------------

    async def _probe(self, backend: Backend) -> bool:
        try:
            reader, writer = await asyncio.wait_for(
                asyncio.open_connection(backend.host, backend.port),
                timeout=self.check_interval * 0.9,
            )
        except (OSError, asyncio.TimeoutError):
            return False
        try:
            if self.mode == "tcp":
                return True
            writer.write(
                f"GET {self.health_path} HTTP/1.1\r\nHost: {backend.host}\r\nConnection: close\r\n\r\n".encode()
            )
            await writer.drain()
            data = await asyncio.wait_for(reader.read(1024), timeout=self.check_interval * 0.9)
            return data.startswith(b"HTTP/1.1 200") or data.startswith(b"HTTP/1.0 200")
        except (OSError, asyncio.TimeoutError):
            return False
        finally:
            writer.close()

    async def _health_loop(self, backend: Backend) -> None:
        while True:
            await asyncio.sleep(self.check_interval)
            up = await self._probe(backend)
            backend.last_health_check = time.time()
            if up:
                backend.consecutive_successes += 1
                backend.consecutive_failures = 0
                if not backend.healthy and backend.consecutive_successes >= HEALTH_STRIKES:
                    backend.healthy = True
                    log.info("backend %s healthy", backend.backend_id)
            else:
                backend.consecutive_failures += 1
                backend.consecutive_successes = 0
                if backend.healthy and backend.consecutive_failures >= HEALTH_STRIKES:
                    backend.healthy = False
                    log.warning("backend %s unhealthy", backend.backend_id)

    # -- TCP mode ----------------------------------------------------------------

    def _tcp_pool(self) -> list[Backend]:
        return self.pools.get("default") or self.backends

    async def _connect_least_connected(self) -> tuple[Backend, asyncio.StreamReader, asyncio.StreamWriter]:
        """Select, increment, connect; one retry on the next candidate."""
        excluded: set[str] = set()
        for _attempt in range(2):
            pool = [b for b in self._tcp_pool() if b.backend_id not in excluded]
            backend = least_conn_next(pool)
            backend.active_connections += 1
            backend.total_assigned += 1
            try:
                reader, writer = await asyncio.wait_for(
                    asyncio.open_connection(backend.host, backend.port),
                    timeout=CONNECT_TIMEOUT,
                )
                return backend, reader, writer
            except (OSError, asyncio.TimeoutError):
                backend.active_connections -= 1
                backend.total_assigned -= 1
                self.totals["backend_errors"] += 1
                excluded.add(backend.backend_id)
        raise NoBackendError("all connect attempts failed")

    async def _handle_tcp(self, client_reader: asyncio.StreamReader, client_writer: asyncio.StreamWriter) -> None:
        self.totals["connections"] += 1
        try:
            backend, backend_reader, backend_writer = await self._connect_least_connected()
        except NoBackendError:
            self.totals["refused"] += 1
            client_writer.close()
            return
        try:
            await asyncio.gather(
                self._pump(client_reader, backend_writer),
                self._pump(backend_reader, client_writer),
            )
        finally:
            backend.active_connections -= 1
            client_writer.close()
            backend_writer.close()

    @staticmethod
    async def _pump(src: asyncio.StreamReader, dst: asyncio.StreamWriter) -> None:
        try:
            while True:
                data = await src.read(SPLICE_CHUNK)
                if not data:
                    break
                dst.write(data)
                await dst.drain()
        except (OSError, ConnectionResetError):
            pass
        finally:
            with contextlib.suppress(OSError, RuntimeError):
                if dst.can_write_eof():
                    dst.write_eof()

    # -- HTTP mode ---------------------------------------------------------------

    async def _handle_http(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.totals["connections"] += 1
        buf = bytearray()
        try:
            while True:
                head = None
                while head is None:
                    try:
                        head = parse_request_head(bytes(buf))
                    except BadRequest:
                        writer.write(serialize_response(simple_response(400, b"bad request\n")))
                        await writer.drain()
                        return
                    if head is None:
                        data = await reader.read(SPLICE_CHUNK)
                        if not data:
                            return
                        buf += data
                req, consumed = head
                try:
                    body_len = req.headers.content_length() or 0
                except BadRequest:
                    writer.write(serialize_response(simple_response(400, b"bad request\n")))
                    await writer.drain()
                    return
                while len(buf) < consumed + body_len:
                    data = await reader.read(SPLICE_CHUNK)
                    if not data:
                        return
                    buf += data
                req.body = bytes(buf[consumed : consumed + body_len])
                del buf[: consumed + body_len]

                self.totals["requests"] += 1
                keep = req.wants_keepalive()
                writer.write(await self._balance_one_request(req, keep))
                await writer.drain()
                if not keep:
                    return
        except (OSError, ConnectionResetError):
            pass
        finally:
            writer.close()

    async def _balance_one_request(self, req: HttpRequest, keep: bool) -> bytes:
        rule = match_rule(self.rules, req.path)
        if rule is None:
            self.totals["refused"] += 1
            return serialize_response(simple_response(503, b"no route\n"))
        pool = self.pools[rule.pool_name]
        try:
            backend = wrr_next(pool, self._wrr[rule.pool_name])
        except NoBackendError:
            self.totals["refused"] += 1
            return serialize_response(simple_response(503, b"no healthy backend\n"))

        backend.active_connections += 1
        backend.total_assigned += 1
        try:
            resp = await self._forward_request(backend, req)
        except (OSError, asyncio.TimeoutError, BadRequest):
            self.totals["backend_errors"] += 1
            resp = simple_response(502, b"bad gateway\n")
        finally:
            backend.active_connections -= 1
        if not keep:
            resp.headers.add("Connection", "close")
        return serialize_response(resp)

    async def _forward_request(self, backend: Backend, req: HttpRequest):
        reader, writer = await asyncio.wait_for(
            asyncio.open_connection(backend.host, backend.port), timeout=CONNECT_TIMEOUT
        )
        try:
            downstream = HttpRequest(
                method=req.method,
                target=req.target,
                version="HTTP/1.1",
                headers=type(req.headers)(
                    [(n, v) for n, v in req.headers.items if n.lower() != "connection"]
                ),
                body=req.body,
            )
            downstream.headers.add("Connection", "close")
            writer.write(serialize_request(downstream))
            await writer.drain()

            buf = bytearray()
            head = None
            while head is None:
                data = await reader.read(SPLICE_CHUNK)
                if not data:
                    raise BadRequest("backend closed before response head")
                buf += data
                head = parse_response_head(bytes(buf))
            resp, consumed = head
            declared = resp.headers.content_length()
            if declared is not None:
                while len(buf) < consumed + declared:
                    data = await reader.read(SPLICE_CHUNK)
                    if not data:
                        raise BadRequest("backend closed mid-body")
                    buf += data
                body = bytes(buf[consumed : consumed + declared])
            else:
                while True:
                    data = await reader.read(SPLICE_CHUNK)
                    if not data:
                        break
                    buf += data
                body = bytes(buf[consumed:])

            resp.body = body
            resp.headers.items = [
                (n, v) for n, v in resp.headers.items if n.lower() != "connection"
            ]
            return resp
        finally:
            writer.close()

    # -- stats -------------------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "mode": self.mode,
            "totals": dict(self.totals),
            "backends": [
                {
                    "id": b.backend_id,
                    "address": b.address,
                    "pool": b.pool,
                    "weight": b.weight,
                    "healthy": b.healthy,
                    "active_connections": b.active_connections,
                    "total_assigned": b.total_assigned,
                }
                for b in self.backends
            ],
        }

    async def _handle_stats_socket(self, reader, writer) -> None:
        writer.write(json.dumps(self.snapshot()).encode() + b"\n")
        with contextlib.suppress(OSError):
            await writer.drain()
        writer.close()

    async def _handle_stats_http(self, reader, writer) -> None:
        with contextlib.suppress(OSError, asyncio.TimeoutError):
            await asyncio.wait_for(reader.read(4096), timeout=5.0)
            body = json.dumps(self.snapshot()).encode()
            resp = simple_response(200, body, "application/json")
            resp.headers.add("Connection", "close")
            writer.write(serialize_response(resp))
            await writer.drain()
        writer.close()
