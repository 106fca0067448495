"""Request-response HTTP server over a resource store.

GET returns stored resources, POST creates or replaces, DELETE removes.
Keep-alive connections process one request at a time (pipelined requests are
answered in order); idle connections close after a timeout.
"""

from __future__ import annotations

import asyncio
import logging

from .http1 import BadRequest, HttpRequest, HttpResponse, parse_request_head, serialize_response, simple_response
from .resources import BENCH_PAGE_PATH, build_bench_page, normalize_path

log = logging.getLogger("httpd")

IDLE_TIMEOUT = 30.0
SUPPORTED_METHODS = ("GET", "POST", "DELETE")


class HttpService:
    def __init__(self, store, *, health_path: str = "/health", idle_timeout: float = IDLE_TIMEOUT):
        self.store = store
        self.health_path = health_path
        self.idle_timeout = idle_timeout
        self._server: asyncio.AbstractServer | None = None
        self.requests_handled = 0

    async def seed_bench_page(self) -> None:
        await self.store.put(BENCH_PAGE_PATH, build_bench_page(), "text/plain")

    async def handle_request(self, req: HttpRequest) -> HttpResponse:
        """Method semantics against the store; framing concerns live in the
        connection loop."""
        self.requests_handled += 1
        if req.method not in SUPPORTED_METHODS:
            resp = simple_response(405, b"method not allowed\n")
            resp.headers.add("Allow", ", ".join(SUPPORTED_METHODS))
            return resp

        path = normalize_path(req.path)
        if path is None:
            return simple_response(400, b"malformed path\n")

        if req.method == "GET" and path == self.health_path:
            return simple_response(200, b"ok\n")

        if req.method == "GET":
            found = await self.store.get(path)
            if found is None:
                return simple_response(404, b"not found\n")
            body, content_type = found
            return simple_response(200, body, content_type)

        if req.method == "POST":
            content_type = req.headers.get("content-type", "application/octet-stream")
            created = await self.store.put(path, req.body, content_type)
            return simple_response(201 if created else 200, b"stored\n")

        # DELETE
        removed = await self.store.delete(path)
        if not removed:
            return simple_response(404, b"not found\n")
        return simple_response(204)

    async def serve(self, host: str, port: int) -> asyncio.AbstractServer:
        await self.seed_bench_page()
        self._server = await asyncio.start_server(self._handle_connection, host, port)
        log.info("httpd listening on %s:%d", host, port)
        return self._server

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def _handle_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
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
                        data = await asyncio.wait_for(
                            reader.read(65536), timeout=self.idle_timeout
                        )
                        if not data:
                            return
                        buf += data
                req, consumed = head

                body_len = 0
                if req.method == "POST":
                    try:
                        declared = req.headers.content_length()
                    except BadRequest:
                        writer.write(serialize_response(simple_response(400, b"bad request\n")))
                        await writer.drain()
                        return
                    if declared is None:
                        writer.write(serialize_response(simple_response(411, b"length required\n")))
                        await writer.drain()
                        return
                    body_len = declared
                else:
                    body_len = req.headers.content_length() or 0

                while len(buf) < consumed + body_len:
                    data = await asyncio.wait_for(
                        reader.read(65536), timeout=self.idle_timeout
                    )
                    if not data:
                        return
                    buf += data
                req.body = bytes(buf[consumed : consumed + body_len])
                del buf[: consumed + body_len]

                resp = await self.handle_request(req)
                keep = req.wants_keepalive()
                if not keep:
                    resp.headers.add("Connection", "close")
                writer.write(serialize_response(resp))
                await writer.drain()
                if not keep:
                    return
        except (asyncio.TimeoutError, ConnectionResetError, OSError):
            pass
        finally:
            writer.close()


async def run_httpd(host: str, port: int, store, health_path: str = "/health") -> None:
    service = HttpService(store, health_path=health_path)
    server = await service.serve(host, port)
    async with server:
        await server.serve_forever()
