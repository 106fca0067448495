"""Master-slave broker cluster: the master serves instance 0 on the base port
and supervises one child process per additional instance, each bound to
base port + index and pinned (best effort) to its own CPU core. A child that
exits is restarted after a fixed backoff."""

from __future__ import annotations

import asyncio
import logging
import os
import sys

log = logging.getLogger("broker.cluster")

RESTART_BACKOFF = 0.5


def pin_to_core(pid: int, index: int) -> None:
    """Best-effort affinity; ignored where unsupported."""
    try:
        cpus = os.sched_getaffinity(0)
        core = sorted(cpus)[index % len(cpus)]
        os.sched_setaffinity(pid, {core})
    except (AttributeError, OSError, PermissionError):
        pass


def slave_command(
    host: str,
    base_port: int,
    instance_count: int,
    instance_index: int,
    bus_path: str | None,
    keepalive_default: int,
) -> list[str]:
    cmd = [
        sys.executable,
        "-m",
        "iotstack.broker",
        "--listen",
        f"{host}:{base_port}",
        "--instances",
        str(instance_count),
        "--instance-index",
        str(instance_index),
        "--keepalive-default",
        str(keepalive_default),
    ]
    if bus_path:
        cmd += ["--bus", bus_path]
    return cmd


class Supervisor:
    """Spawns and restarts slave instance processes."""

    def __init__(
        self,
        host: str,
        base_port: int,
        instance_count: int,
        bus_path: str | None,
        keepalive_default: int,
        *,
        restart_backoff: float = RESTART_BACKOFF,
    ):
        self.host = host
        self.base_port = base_port
        self.instance_count = instance_count
        self.bus_path = bus_path
        self.keepalive_default = keepalive_default
        self.restart_backoff = restart_backoff
        self.children: dict[int, asyncio.subprocess.Process] = {}
        self._tasks: list[asyncio.Task] = []
        self._stopped = False

    async def start(self) -> None:
        available = os.cpu_count() or 1
        if self.instance_count > available:
            log.warning(
                "%d instances requested but only %d cores; core pinning will overlap",
                self.instance_count,
                available,
            )
        pin_to_core(0, 0)  # the master's own instance takes core 0
        for index in range(1, self.instance_count):
            self._tasks.append(asyncio.create_task(self._supervise(index)))

    async def _spawn(self, index: int) -> asyncio.subprocess.Process:
        cmd = slave_command(
            self.host,
            self.base_port,
            self.instance_count,
            index,
            self.bus_path,
            self.keepalive_default,
        )
        proc = await asyncio.create_subprocess_exec(*cmd)
        pin_to_core(proc.pid, index)
        log.info("slave %d started (pid %d, port %d)", index, proc.pid, self.base_port + index)
        return proc

    async def _supervise(self, index: int) -> None:
        while not self._stopped:
            proc = await self._spawn(index)
            self.children[index] = proc
            code = await proc.wait()
            if self._stopped:
                return
            log.warning(
                "slave %d (pid %d) exited with %s; restarting in %.1fs",
                index,
                proc.pid,
                code,
                self.restart_backoff,
            )
            await asyncio.sleep(self.restart_backoff)

    async def stop(self) -> None:
        self._stopped = True
        for task in self._tasks:
            task.cancel()
        for proc in self.children.values():
            if proc.returncode is None:
                proc.terminate()
        for proc in self.children.values():
            if proc.returncode is None:
                try:
                    await asyncio.wait_for(proc.wait(), timeout=3.0)
                except asyncio.TimeoutError:
                    proc.kill()
