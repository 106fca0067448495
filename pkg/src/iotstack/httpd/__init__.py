from .http1 import BadRequest, Headers, HttpRequest, HttpResponse, parse_request_head, parse_response_head, serialize_request, serialize_response
from .resources import BENCH_PAGE_PATH, MemoryStore, SlotBackedStore, build_bench_page
from .server import HttpService

__all__ = [
    "BENCH_PAGE_PATH",
    "BadRequest",
    "Headers",
    "HttpRequest",
    "HttpResponse",
    "HttpService",
    "MemoryStore",
    "SlotBackedStore",
    "build_bench_page",
    "parse_request_head",
    "parse_response_head",
    "serialize_request",
    "serialize_response",
]
