"""Length-prefixed framing over stream sockets: u32 little-endian length, then payload."""

from __future__ import annotations

import socket
import struct

from .errors import CorruptionError

_LEN = struct.Struct("<I")
MAX_FRAME = 64 * 1024 * 1024


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_LEN.pack(len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> bytes | None:
    """Next payload, or None on a clean close between frames."""
    head = b""
    while len(head) < _LEN.size:
        chunk = sock.recv(_LEN.size - len(head))
        if not chunk:
            if head:
                raise ConnectionError("peer closed the connection mid-frame")
            return None
        head += chunk
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise CorruptionError(f"frame of {n} bytes exceeds limit")
    return _recv_exact(sock, n)


def request(address: tuple[str, int], payload: bytes, timeout: float) -> bytes:
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.settimeout(timeout)
        send_frame(sock, payload)
        reply = recv_frame(sock)
    if reply is None:
        raise ConnectionError(f"{address} closed without replying")
    return reply


class Reader:
    """Cursor over a bytes payload for struct-based decoding."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, fmt: str):
        s = struct.Struct("<" + fmt)
        if self.off + s.size > len(self.raw):
            raise CorruptionError("message truncated")
        vals = s.unpack_from(self.raw, self.off)
        self.off += s.size
        return vals if len(vals) > 1 else vals[0]

    def bytes(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CorruptionError("message truncated")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return bytes(out)

    def text(self) -> str:
        return self.bytes(self.take("H")).decode("utf-8")

    def done(self) -> None:
        if self.off != len(self.raw):
            raise CorruptionError(f"{len(self.raw) - self.off} trailing bytes in message")


def pack_text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw
