"""HTTP/1.1 subset parsing and serialization.

Requests: method, target, headers, optional Content-Length body (no chunked
transfer encoding). Header order is preserved; lookups are case-insensitive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

MAX_HEAD = 32 * 1024
MAX_BODY = 8 * 1024 * 1024

REASONS = {
    200: "OK",
    201: "Created",
    204: "No Content",
    400: "Bad Request",
    404: "Not Found",
    405: "Method Not Allowed",
    408: "Request Timeout",
    411: "Length Required",
    500: "Internal Server Error",
    502: "Bad Gateway",
    503: "Service Unavailable",
}


class BadRequest(Exception):
    pass


@dataclass
class Headers:
    """Ordered name/value multimap with case-insensitive lookup."""

    items: list[tuple[str, str]] = field(default_factory=list)

    def get(self, name: str, default: str | None = None) -> str | None:
        lname = name.lower()
        for key, value in self.items:
            if key.lower() == lname:
                return value
        return default

    def add(self, name: str, value: str) -> None:
        self.items.append((name, value))

    def content_length(self) -> int | None:
        raw = self.get("content-length")
        if raw is None:
            return None
        try:
            n = int(raw.strip())
        except ValueError:
            raise BadRequest(f"bad Content-Length {raw!r}") from None
        if n < 0 or n > MAX_BODY:
            raise BadRequest(f"Content-Length {n} out of bounds")
        return n


@dataclass
class HttpRequest:
    method: str
    target: str
    version: str
    headers: Headers
    body: bytes = b""

    @property
    def path(self) -> str:
        return self.target.split("?", 1)[0]

    def wants_keepalive(self) -> bool:
        conn = (self.headers.get("connection") or "").lower()
        if self.version == "HTTP/1.0":
            return conn == "keep-alive"
        return conn != "close"


@dataclass
class HttpResponse:
    status: int
    headers: Headers = field(default_factory=Headers)
    body: bytes = b""

    def wants_keepalive(self) -> bool:
        return (self.headers.get("connection") or "").lower() != "close"


def parse_request_head(buf: bytes) -> tuple[HttpRequest, int] | None:
    """Parse the request line and headers from the front of ``buf``.

    Returns (request without body, bytes consumed) or None if the blank line
    has not arrived yet. Raises BadRequest on malformed input.
    """
    end = buf.find(b"\r\n\r\n")
    if end == -1:
        if len(buf) > MAX_HEAD:
            raise BadRequest("request head too large")
        return None
    head = buf[:end]
    if len(head) > MAX_HEAD:
        raise BadRequest("request head too large")
    try:
        lines = head.decode("ascii").split("\r\n")
    except UnicodeDecodeError:
        raise BadRequest("non-ASCII request head") from None

    parts = lines[0].split(" ")
    if len(parts) != 3:
        raise BadRequest(f"malformed request line {lines[0]!r}")
    method, target, version = parts
    if version not in ("HTTP/1.1", "HTTP/1.0"):
        raise BadRequest(f"unsupported version {version!r}")
    if not target.startswith("/"):
        raise BadRequest(f"target must be absolute path, got {target!r}")

    headers = Headers()
    for line in lines[1:]:
        if not line:
            continue
        if ":" not in line:
            raise BadRequest(f"malformed header line {line!r}")
        name, _, value = line.partition(":")
        if not name or name != name.strip():
            raise BadRequest(f"malformed header name {name!r}")
        headers.add(name, value.strip())

    req = HttpRequest(method=method, target=target, version=version, headers=headers)
    return req, end + 4


def parse_response_head(buf: bytes) -> tuple[HttpResponse, int] | None:
    """Parse a status line and headers; same conventions as requests."""
    end = buf.find(b"\r\n\r\n")
    if end == -1:
        if len(buf) > MAX_HEAD:
            raise BadRequest("response head too large")
        return None
    lines = buf[:end].decode("ascii", errors="replace").split("\r\n")
    parts = lines[0].split(" ", 2)
    if len(parts) < 2 or not parts[0].startswith("HTTP/1."):
        raise BadRequest(f"malformed status line {lines[0]!r}")
    try:
        status = int(parts[1])
    except ValueError:
        raise BadRequest(f"bad status code {parts[1]!r}") from None
    headers = Headers()
    for line in lines[1:]:
        if not line:
            continue
        name, _, value = line.partition(":")
        headers.add(name, value.strip())
    return HttpResponse(status=status, headers=headers), end + 4


def serialize_response(resp: HttpResponse) -> bytes:
    reason = REASONS.get(resp.status, "Unknown")
    lines = [f"HTTP/1.1 {resp.status} {reason}"]
    seen_length = False
    for name, value in resp.headers.items:
        if name.lower() == "content-length":
            seen_length = True
        lines.append(f"{name}: {value}")
    if not seen_length and resp.status != 204:
        lines.append(f"Content-Length: {len(resp.body)}")
    head = ("\r\n".join(lines) + "\r\n\r\n").encode("ascii")
    return head + resp.body


def serialize_request(req: HttpRequest) -> bytes:
    lines = [f"{req.method} {req.target} {req.version}"]
    for name, value in req.headers.items:
        lines.append(f"{name}: {value}")
    head = ("\r\n".join(lines) + "\r\n\r\n").encode("ascii")
    return head + req.body


def simple_response(status: int, body: bytes = b"", content_type: str = "text/plain") -> HttpResponse:
    headers = Headers()
    if body or status not in (204,):
        headers.add("Content-Type", content_type)
    return HttpResponse(status=status, headers=headers, body=body)
