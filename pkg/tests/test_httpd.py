"""HTTP service: method algebra, framing, bench page, pipelining, timeouts."""

import asyncio
import http.client
import random
import threading

from iotstack.httpd import HttpService, MemoryStore, SlotBackedStore, build_bench_page
from iotstack.slotstore import ClusterClient

from conftest import free_port, make_manifest_text, start_cluster


class ServerThread:
    """HttpService on a background loop so stdlib blocking clients can talk to it."""

    def __init__(self, idle_timeout=30.0):
        self.port = free_port()
        self.idle_timeout = idle_timeout
        self._ready = threading.Event()
        self._loop = None
        self.service = None
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        self._ready.wait(5.0)

    def _run(self):
        async def amain():
            self.service = HttpService(MemoryStore(), idle_timeout=self.idle_timeout)
            server = await self.service.serve("127.0.0.1", self.port)
            self._ready.set()
            async with server:
                await server.serve_forever()

        self._loop = asyncio.new_event_loop()
        try:
            self._loop.run_until_complete(amain())
        except asyncio.CancelledError:
            pass

    def stop(self):
        for task in asyncio.all_tasks(self._loop):
            self._loop.call_soon_threadsafe(task.cancel)
        self._thread.join(timeout=5.0)


def test_method_algebra_and_independent_parser():
    srv = ServerThread()
    try:
        conn = http.client.HTTPConnection("127.0.0.1", srv.port)
        rng = random.Random(123)
        for i in range(50):
            path = f"/res/{i}"
            body = rng.randbytes(rng.randint(0, 512))
            conn.request("POST", path, body=body, headers={"Content-Type": "application/octet-stream"})
            resp = conn.getresponse()
            assert resp.status == 201
            resp.read()

            conn.request("GET", path)
            resp = conn.getresponse()
            got = resp.read()
            assert resp.status == 200
            assert got == body
            assert int(resp.headers["Content-Length"]) == len(body)

            conn.request("POST", path, body=b"replaced")
            resp = conn.getresponse()
            assert resp.status == 200  # replaced, not created
            resp.read()

            conn.request("DELETE", path)
            resp = conn.getresponse()
            assert resp.status == 204
            resp.read()

            conn.request("GET", path)
            resp = conn.getresponse()
            assert resp.status == 404
            resp.read()
        conn.close()
    finally:
        srv.stop()


def test_bench_page_is_1024_bytes_and_stable():
    page = build_bench_page()
    assert len(page) == 1024
    assert build_bench_page() == page

    srv = ServerThread()
    try:
        conn = http.client.HTTPConnection("127.0.0.1", srv.port)
        bodies = set()
        for _ in range(20):
            conn.request("GET", "/bench/page")
            resp = conn.getresponse()
            body = resp.read()
            assert resp.status == 200
            assert len(body) == 1024
            bodies.add(body)
        assert bodies == {page}
        conn.close()
    finally:
        srv.stop()


def test_delete_missing_404_and_health():
    srv = ServerThread()
    try:
        conn = http.client.HTTPConnection("127.0.0.1", srv.port)
        conn.request("DELETE", "/missing")
        resp = conn.getresponse()
        assert resp.status == 404
        resp.read()
        conn.request("GET", "/health")
        resp = conn.getresponse()
        assert resp.status == 200
        resp.read()
        conn.close()
    finally:
        srv.stop()


def test_unsupported_method_405():
    srv = ServerThread()
    try:
        conn = http.client.HTTPConnection("127.0.0.1", srv.port)
        conn.request("PUT", "/x", body=b"y")
        resp = conn.getresponse()
        assert resp.status == 405
        assert "GET" in resp.headers["Allow"]
        resp.read()
        conn.close()
    finally:
        srv.stop()


def test_post_without_length_411_and_bad_request_400():
    srv = ServerThread()
    try:
        import socket

        s = socket.create_connection(("127.0.0.1", srv.port))
        s.sendall(b"POST /x HTTP/1.1\r\nHost: a\r\n\r\n")
        data = s.recv(4096)
        assert data.startswith(b"HTTP/1.1 411")
        s.close()

        s = socket.create_connection(("127.0.0.1", srv.port))
        s.sendall(b"NOT A REQUEST\r\n\r\n")
        data = s.recv(4096)
        assert data.startswith(b"HTTP/1.1 400")
        s.close()

        s = socket.create_connection(("127.0.0.1", srv.port))
        s.sendall(b"GET /../etc HTTP/1.1\r\nHost: a\r\n\r\n")
        data = s.recv(4096)
        assert data.startswith(b"HTTP/1.1 400")
        s.close()
    finally:
        srv.stop()


def test_pipelined_requests_answered_in_order():
    srv = ServerThread()
    try:
        import socket

        s = socket.create_connection(("127.0.0.1", srv.port))
        s.sendall(
            b"POST /p1 HTTP/1.1\r\nHost: a\r\nContent-Length: 3\r\n\r\nabc"
            b"GET /p1 HTTP/1.1\r\nHost: a\r\n\r\n"
            b"GET /missing HTTP/1.1\r\nHost: a\r\nConnection: close\r\n\r\n"
        )
        raw = b""
        while True:
            chunk = s.recv(65536)
            if not chunk:
                break
            raw += chunk
        s.close()
        assert raw.count(b"HTTP/1.1 ") == 3
        first, second, third = raw.split(b"HTTP/1.1 ")[1:]
        assert first.startswith(b"201")
        assert second.startswith(b"200") and b"abc" in second
        assert third.startswith(b"404")
    finally:
        srv.stop()


def test_idle_connection_closed_by_server():
    srv = ServerThread(idle_timeout=0.5)
    try:
        import socket, time

        s = socket.create_connection(("127.0.0.1", srv.port))
        s.settimeout(3.0)
        start = time.monotonic()
        data = s.recv(1024)  # blocks until server closes
        elapsed = time.monotonic() - start
        assert data == b""
        assert elapsed < 2.5
        s.close()
    finally:
        srv.stop()


def test_concurrent_clients_all_served(run):
    async def scenario():
        service = HttpService(MemoryStore())
        port = free_port()
        server = await service.serve("127.0.0.1", port)

        async def client(n_requests):
            reader, writer = await asyncio.open_connection("127.0.0.1", port)
            ok = 0
            buf = b""
            for _ in range(n_requests):
                writer.write(b"GET /bench/page HTTP/1.1\r\nHost: a\r\n\r\n")
                await writer.drain()
                # read exactly one response: head + 1024 body
                while b"\r\n\r\n" not in buf:
                    buf += await reader.read(65536)
                head_end = buf.index(b"\r\n\r\n") + 4
                while len(buf) < head_end + 1024:
                    buf += await reader.read(65536)
                if buf.startswith(b"HTTP/1.1 200"):
                    ok += 1
                buf = buf[head_end + 1024 :]
            writer.close()
            return ok

        results = await asyncio.gather(*[client(10) for _ in range(100)])
        server.close()
        await server.wait_closed()
        assert sum(results) == 1000

    run(scenario())


def test_slot_backed_store_round_trip(run, tmp_path):
    manifest, cluster = start_cluster(make_manifest_text(2, tmp_path))

    async def scenario():
        await cluster.start()
        service = HttpService(SlotBackedStore(ClusterClient(manifest)))
        port = free_port()
        server = await service.serve("127.0.0.1", port)

        reader, writer = await asyncio.open_connection("127.0.0.1", port)
        writer.write(
            b"POST /via/slots HTTP/1.1\r\nHost: a\r\nContent-Length: 5\r\n\r\nhello"
            b"GET /via/slots HTTP/1.1\r\nHost: a\r\nConnection: close\r\n\r\n"
        )
        await writer.drain()
        raw = b""
        while True:
            chunk = await reader.read(65536)
            if not chunk:
                break
            raw += chunk
        writer.close()
        assert b"201" in raw.split(b"\r\n")[0]
        assert raw.endswith(b"hello")

        # the resource genuinely lives in the cluster
        probe = ClusterClient(manifest)
        blob = await probe.get(b"/via/slots")
        assert blob is not None and blob.endswith(b"hello")
        probe.close()

        server.close()
        await server.wait_closed()
        await cluster.stop()

    run(scenario())
