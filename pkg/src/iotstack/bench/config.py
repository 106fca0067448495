"""Benchmark configuration and the collected metrics report."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field


@dataclass
class BenchConfig:
    mode: str  # "http" | "mqtt"
    clients: int
    duration_seconds: float
    target: str  # host:port
    request_timeout_seconds: float = 10.0  # HTTP mode
    publish_interval_seconds: float = 10.0  # MQTT mode
    ramp_seconds: float | None = None  # None -> 10% of duration
    seed: int = 0
    qos: int = 1  # MQTT publish/subscribe qos
    cpu_pids: tuple[int, ...] = ()
    cpu_interval_ms: int = 500
    drain_seconds: float = 2.0  # MQTT: grace before counting in-flight
    max_ops_per_client: int | None = None  # cap for deterministic-schedule tests

    def __post_init__(self):
        if self.mode not in ("http", "mqtt"):
            raise ValueError(f"mode must be http or mqtt, got {self.mode!r}")
        if self.clients < 1 or self.duration_seconds <= 0:
            raise ValueError("clients and duration must be positive")
        if self.ramp_seconds is None:
            self.ramp_seconds = 0.1 * self.duration_seconds

    @property
    def host(self) -> str:
        return self.target.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.target.rsplit(":", 1)[1])

    def echo(self) -> dict:
        return dataclasses.asdict(self)


class ConfigurationError(Exception):
    """Target unusable before the run started (distinct from in-run failures)."""


# Exponential-ish bucket upper bounds in microseconds: 1,2,5 per decade.
def _build_buckets() -> list[int]:
    bounds = []
    scale = 1
    while scale <= 100_000_000:  # up to 100 s
        for mult in (1, 2, 5):
            bounds.append(mult * scale)
        scale *= 10
    return bounds


LATENCY_BUCKETS_US = _build_buckets()


class LatencyHistogram:
    """Fixed microsecond buckets plus exact count/sum/min/max."""

    def __init__(self):
        self.counts = [0] * (len(LATENCY_BUCKETS_US) + 1)
        self.total = 0
        self.sum_us = 0
        self.min_us: int | None = None
        self.max_us: int | None = None

    def record(self, latency_us: int) -> None:
        lo, hi = 0, len(LATENCY_BUCKETS_US)
        while lo < hi:
            mid = (lo + hi) // 2
            if latency_us <= LATENCY_BUCKETS_US[mid]:
                hi = mid
            else:
                lo = mid + 1
        self.counts[lo] += 1
        self.total += 1
        self.sum_us += latency_us
        self.min_us = latency_us if self.min_us is None else min(self.min_us, latency_us)
        self.max_us = latency_us if self.max_us is None else max(self.max_us, latency_us)

    @property
    def mean_us(self) -> float:
        return self.sum_us / self.total if self.total else 0.0

    def rows(self) -> list[tuple[str, int]]:
        rows = []
        for i, count in enumerate(self.counts):
            label = (
                f"<={LATENCY_BUCKETS_US[i]}"
                if i < len(LATENCY_BUCKETS_US)
                else f">{LATENCY_BUCKETS_US[-1]}"
            )
            rows.append((label, count))
        return rows


@dataclass
class MetricsReport:
    config: BenchConfig
    success_count: int = 0
    failure_count: int = 0
    in_flight_at_end: int = 0
    issued: int = 0
    latency: LatencyHistogram = field(default_factory=LatencyHistogram)
    throughput: float = 0.0  # successes/s inside the measurement window
    raw_throughput: float = 0.0  # successes/s over the whole run
    window_seconds: float = 0.0
    mean_cpu_percent: float = 0.0
    cpu_series: list[tuple[float, int, float | None]] = field(default_factory=list)
    max_outstanding: int = 0
    duplicate_count: int = 0
    started_at: float = field(default_factory=time.time)

    @property
    def mean_latency_us(self) -> float:
        return self.latency.mean_us

    def check_conservation(self) -> None:
        total = self.success_count + self.failure_count + self.in_flight_at_end
        if total != self.issued:
            raise AssertionError(
                f"conservation violated: {self.success_count}+{self.failure_count}"
                f"+{self.in_flight_at_end} != {self.issued}"
            )
