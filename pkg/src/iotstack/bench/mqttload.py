"""MQTT loopback load: client i subscribes to bench/i and publishes a payload
carrying a sequence number and send timestamp every interval. Receiving its
own message back gives transmission latency on a single clock; sequence
accounting turns undelivered messages into failures."""

from __future__ import annotations

import asyncio
import random
import time

from .config import BenchConfig, ConfigurationError, MetricsReport
from .cpu import mean_cpu, sample_cpu
from .mqttclient import MqttClient, MqttClientError

GAUGE_INTERVAL = 0.1


class _Shared:
    def __init__(self, cfg: BenchConfig, report: MetricsReport):
        self.cfg = cfg
        self.report = report
        self.window_successes = 0
        self.start = 0.0
        self.deadline = 0.0
        self.window_start = 0.0
        self.outstanding = 0  # published, not yet looped back


def _payload(client_index: int, seq: int) -> bytes:
    return f"{client_index}:{seq}:{time.perf_counter_ns() // 1000}".encode("ascii")


def _parse_payload(payload: bytes) -> tuple[int, int, int]:
    client_index, seq, ts_us = payload.split(b":")
    return int(client_index), int(seq), int(ts_us)


class _BenchClient:
    def __init__(self, index: int, shared: _Shared):
        self.index = index
        self.shared = shared
        self.pending: dict[int, float] = {}  # seq -> publish time (perf_counter)
        self.seen: set[int] = set()
        self.client: MqttClient | None = None

    def on_message(self, topic: str, payload: bytes, qos: int) -> None:
        report = self.shared.report
        try:
            _, seq, ts_us = _parse_payload(payload)
        except ValueError:
            return
        if seq in self.seen:
            report.duplicate_count += 1
            return
        self.seen.add(seq)
        if self.pending.pop(seq, None) is None:
            return
        self.shared.outstanding -= 1
        now_us = time.perf_counter_ns() // 1000
        latency_us = max(now_us - ts_us, 0)
        report.success_count += 1
        now = time.perf_counter()
        if self.shared.window_start <= now:
            self.shared.window_successes += 1
            report.latency.record(latency_us)

    async def run(self, offset: float) -> None:
        cfg = self.shared.cfg
        report = self.shared.report
        await asyncio.sleep(offset)
        topic = f"bench/{self.index}"
        try:
            self.client = await MqttClient.connect(
                cfg.host,
                cfg.port,
                f"bench-{cfg.seed}-{self.index}",
                keep_alive=60,
                on_message=self.on_message,
            )
            await self.client.subscribe(topic, qos=cfg.qos)
        except (OSError, MqttClientError, asyncio.TimeoutError):
            report.issued += 1
            report.failure_count += 1  # connect/subscribe rejection; run continues
            return

        seq = 0
        started = time.perf_counter()
        while True:
            now = time.perf_counter()
            if now >= self.shared.deadline:
                break
            if cfg.max_ops_per_client is not None and seq >= cfg.max_ops_per_client:
                break
            try:
                report.issued += 1
                self.pending[seq] = now
                self.shared.outstanding += 1
                self.client.publish(topic, _payload(self.index, seq), qos=cfg.qos)
            except (OSError, MqttClientError):
                self.pending.pop(seq, None)
                self.shared.outstanding -= 1
                report.failure_count += 1
                break  # connection gone; this client is done
            seq += 1
            # absolute schedule so intervals do not drift under load
            next_at = started + seq * cfg.publish_interval_seconds
            delay = next_at - time.perf_counter()
            if delay > 0:
                await asyncio.sleep(delay)

    def settle(self, drain_started: float) -> None:
        """After the drain, split still-pending messages into in-flight
        (published within the drain window) and failures."""
        report = self.shared.report
        for seq, published_at in self.pending.items():
            if drain_started - published_at < self.shared.cfg.drain_seconds:
                report.in_flight_at_end += 1
            else:
                report.failure_count += 1
        self.pending.clear()

    def close(self) -> None:
        if self.client is not None:
            self.client.close()


async def run_mqtt_load(cfg: BenchConfig) -> MetricsReport:
    if cfg.mode != "mqtt":
        raise ConfigurationError("run_mqtt_load requires mode=mqtt")
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

    clients = [_BenchClient(i, shared) for i in range(cfg.clients)]
    tasks = [
        asyncio.create_task(clients[i].run(offsets[i])) for i in range(cfg.clients)
    ]
    await asyncio.gather(*tasks, return_exceptions=True)

    # drain: let loopbacks in transit arrive before settling the ledger
    drain_started = time.perf_counter()
    await asyncio.sleep(cfg.drain_seconds)
    for client in clients:
        client.settle(drain_started)
        client.close()

    stop_cpu.set()
    if cpu_task is not None:
        report.cpu_series = await cpu_task
        report.mean_cpu_percent = mean_cpu(report.cpu_series)

    window = max(cfg.duration_seconds - cfg.ramp_seconds, 1e-9)
    elapsed = max(drain_started - shared.start, 1e-9)
    report.window_seconds = window
    report.throughput = shared.window_successes / window
    report.raw_throughput = report.success_count / elapsed
    report.check_conservation()
    return report
