"""Closed-loop HTTP load: each client holds one keep-alive connection and at
most one outstanding GET; a timed-out request counts as a failure and the
connection is re-established."""

from __future__ import annotations

import asyncio
import random
import time

from .config import BenchConfig, ConfigurationError, MetricsReport
from .cpu import mean_cpu, sample_cpu

REQUEST = b"GET /bench/page HTTP/1.1\r\nHost: bench\r\n\r\n"
GAUGE_INTERVAL = 0.1


class _Shared:
    def __init__(self, cfg: BenchConfig, report: MetricsReport):
        self.cfg = cfg
        self.report = report
        self.outstanding = 0
        self.window_successes = 0
        self.start = 0.0
        self.deadline = 0.0
        self.window_start = 0.0


class _ClientState:
    __slots__ = ("in_flight",)

    def __init__(self):
        self.in_flight = False


async def _read_response(reader: asyncio.StreamReader, buf: bytearray) -> bytearray:
    """Consume exactly one response from the stream; returns leftover bytes."""
    while True:
        head_end = buf.find(b"\r\n\r\n")
        if head_end != -1:
            break
        data = await reader.read(65536)
        if not data:
            raise ConnectionResetError("server closed mid-response")
        buf += data
    head = bytes(buf[:head_end]).decode("ascii", errors="replace")
    length = 0
    for line in head.split("\r\n")[1:]:
        if line.lower().startswith("content-length:"):
            length = int(line.split(":", 1)[1].strip())
            break
    total = head_end + 4 + length
    while len(buf) < total:
        data = await reader.read(65536)
        if not data:
            raise ConnectionResetError("server closed mid-body")
        buf += data
    del buf[:total]
    return buf


async def _client_loop(state: _ClientState, offset: float, shared: _Shared) -> None:
    cfg = shared.cfg
    report = shared.report
    await asyncio.sleep(offset)
    conn = None
    buf = bytearray()
    ops = 0
    while True:
        if time.perf_counter() >= shared.deadline:
            break
        if cfg.max_ops_per_client is not None and ops >= cfg.max_ops_per_client:
            break
        ops += 1
        report.issued += 1
        shared.outstanding += 1
        state.in_flight = True
        t0 = time.perf_counter()
        try:
            if conn is None:
                conn = await asyncio.wait_for(
                    asyncio.open_connection(cfg.host, cfg.port),
                    timeout=cfg.request_timeout_seconds,
                )
                buf = bytearray()
            reader, writer = conn
            writer.write(REQUEST)
            await writer.drain()
            remaining = cfg.request_timeout_seconds - (time.perf_counter() - t0)
            buf = await asyncio.wait_for(
                _read_response(reader, buf), timeout=max(remaining, 0.001)
            )
            t1 = time.perf_counter()
            report.success_count += 1
            if t1 <= shared.deadline and t0 >= shared.window_start:
                shared.window_successes += 1
                report.latency.record(int((t1 - t0) * 1_000_000))
        except (OSError, asyncio.TimeoutError, ConnectionResetError):
            report.failure_count += 1
            if conn is not None:
                conn[1].close()
                conn = None
        # not reached when cancelled mid-operation: the op stays in flight
        state.in_flight = False
        shared.outstanding -= 1
    if conn is not None:
        conn[1].close()


async def _gauge_loop(shared: _Shared) -> None:
    while True:
        await asyncio.sleep(GAUGE_INTERVAL)
        assert shared.outstanding <= shared.cfg.clients, "closed-loop discipline violated"
        shared.report.max_outstanding = max(shared.report.max_outstanding, shared.outstanding)


async def run_http_load(cfg: BenchConfig) -> MetricsReport:
    if cfg.mode != "http":
        raise ConfigurationError("run_http_load requires mode=http")
    try:
        _reader, writer = await asyncio.open_connection(cfg.host, cfg.port)
        writer.close()
    except OSError as exc:
        raise ConfigurationError(f"target {cfg.target} unreachable: {exc}") from exc

    report = MetricsReport(config=cfg)
    shared = _Shared(cfg, report)
    rng = random.Random(cfg.seed)
    offsets = sorted(
        rng.uniform(0, cfg.ramp_seconds) if cfg.ramp_seconds > 0 else 0.0
        for _ in range(cfg.clients)
    )

    shared.start = time.perf_counter()
    shared.deadline = shared.start + cfg.duration_seconds
    shared.window_start = shared.start + cfg.ramp_seconds

    stop_cpu = asyncio.Event()
    cpu_task = (
        asyncio.create_task(sample_cpu(list(cfg.cpu_pids), cfg.cpu_interval_ms, stop_cpu))
        if cfg.cpu_pids
        else None
    )
    gauge = asyncio.create_task(_gauge_loop(shared))
    states = [_ClientState() for _ in range(cfg.clients)]
    tasks = [
        asyncio.create_task(_client_loop(states[i], offsets[i], shared))
        for i in range(cfg.clients)
    ]

    grace = min(cfg.request_timeout_seconds, 2.0)
    done, pending = await asyncio.wait(tasks, timeout=cfg.duration_seconds + grace)
    for task, state in zip(tasks, states):
        if task in pending and state.in_flight:
            report.in_flight_at_end += 1
    for task in pending:
        task.cancel()
    if pending:
        await asyncio.gather(*pending, return_exceptions=True)

    gauge.cancel()
    stop_cpu.set()
    if cpu_task is not None:
        report.cpu_series = await cpu_task
        report.mean_cpu_percent = mean_cpu(report.cpu_series)

    elapsed = max(time.perf_counter() - shared.start, 1e-9)
    window = max(cfg.duration_seconds - cfg.ramp_seconds, 1e-9)
    report.window_seconds = window
    report.throughput = shared.window_successes / window
    report.raw_throughput = report.success_count / min(elapsed, cfg.duration_seconds)
    report.check_conservation()
    return report
