"""Per-process CPU sampling for servers under test."""

from __future__ import annotations

import asyncio
import time

import psutil


async def sample_cpu(
    pids: list[int],
    interval_ms: int,
    stop: asyncio.Event,
) -> list[tuple[float, int, float | None]]:
    """Sample each pid's CPU utilization until ``stop`` is set.

    Utilization is delta CPU time over delta wall time as a percentage of one
    core. A vanished pid contributes one final tombstone row (None) and is
    dropped from further sampling.
    """
    procs: dict[int, psutil.Process] = {}
    for pid in pids:
        try:
            proc = psutil.Process(pid)
            proc.cpu_percent(None)  # prime the internal counter
            procs[pid] = proc
        except psutil.NoSuchProcess:
            pass

    series: list[tuple[float, int, float | None]] = []
    interval = interval_ms / 1000.0
    while not stop.is_set():
        try:
            await asyncio.wait_for(stop.wait(), timeout=interval)
            break
        except asyncio.TimeoutError:
            pass
        now = time.time()
        for pid, proc in list(procs.items()):
            try:
                percent = proc.cpu_percent(None)
                series.append((now, pid, percent))
            except psutil.NoSuchProcess:
                series.append((now, pid, None))  # tombstone: series truncated
                del procs[pid]
    return series


def mean_cpu(series: list[tuple[float, int, float | None]]) -> float:
    values = [v for _, _, v in series if v is not None]
    return sum(values) / len(values) if values else 0.0
