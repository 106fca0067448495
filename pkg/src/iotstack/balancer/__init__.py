from .policy import Backend, NoBackendError, RouteRule, WrrState, least_conn_next, match_rule, wrr_next
from .proxy import Balancer

__all__ = [
    "Backend",
    "Balancer",
    "NoBackendError",
    "RouteRule",
    "WrrState",
    "least_conn_next",
    "match_rule",
    "wrr_next",
]
