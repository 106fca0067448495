"""Backend selection policies: smooth weighted round robin, least connections.

Selection operates on the healthy subset only. Least-connections ties break
on configuration order, which doubles as the backend id ordering, so picks
are deterministic and testable.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class NoBackendError(Exception):
    """No healthy backend to select; callers answer 503 or refuse the connection."""


@dataclass
class Backend:
    backend_id: str
    host: str
    port: int
    weight: int = 1
    pool: str = "default"
    index: int = 0  # configuration order; least-connections tie-break
    healthy: bool = True
    active_connections: int = 0
    total_assigned: int = 0
    consecutive_failures: int = 0
    consecutive_successes: int = 0
    last_health_check: float = 0.0

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass
class WrrState:
    """Current-weight accumulator for the smooth WRR recurrence."""

    current: dict[str, int] = field(default_factory=dict)


def wrr_next(pool: list[Backend], state: WrrState) -> Backend:
    """Smooth weighted round robin over the healthy members of ``pool``.

    Each step adds every weight to its accumulator, picks the maximum, and
    subtracts the weight total from the winner, interleaving selections so
    any window of sum(weights) picks contains backend i exactly weight_i
    times. ``state`` is mutated.
    """
    candidates = [b for b in pool if b.healthy]
    if not candidates:
        raise NoBackendError("no healthy backend in pool")
    total = 0
    best: Backend | None = None
    best_current = 0
    for backend in candidates:
        cur = state.current.get(backend.backend_id, 0) + backend.weight
        state.current[backend.backend_id] = cur
        total += backend.weight
        if best is None or cur > best_current:
            best = backend
            best_current = cur
    state.current[best.backend_id] -= total
    return best


def least_conn_next(pool: list[Backend]) -> Backend:
    """Healthy backend with the fewest active connections; ties go to the
    lowest backend id (configuration order)."""
    candidates = [b for b in pool if b.healthy]
    if not candidates:
        raise NoBackendError("no healthy backend in pool")
    return min(candidates, key=lambda b: (b.active_connections, b.index))


@dataclass
class RouteRule:
    path_prefix: str
    pool_name: str


def match_rule(rules: list[RouteRule], path: str) -> RouteRule | None:
    """First rule whose prefix matches wins; rules are checked in order."""
    for rule in rules:
        if path.startswith(rule.path_prefix):
            return rule
    return None
