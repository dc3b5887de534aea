"""Length-prefixed frames over byte streams.

Layout: one kind byte (0 = null payload, 1 = text), then for text a 32-bit
big-endian length and that many UTF-8 bytes.  A null frame is the single
byte ``00``.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

from .errors import MalformedFrame, PeerClosed, PeerTimeout

NULL_KIND = 0
TEXT_KIND = 1
_LEN = struct.Struct(">I")
MAX_LEN = 2**32 - 1
DEFAULT_DEADLINE = 5.0


def encode_frame(payload: str | None) -> bytes:
    if payload is None:
        return bytes((NULL_KIND,))
    body = payload.encode("utf-8")
    if len(body) > MAX_LEN:
        raise ValueError("payload longer than 2**32-1 bytes")
    return bytes((TEXT_KIND,)) + _LEN.pack(len(body)) + body


def decode_frame(data: bytes) -> tuple[str | None, bytes]:
    """Decode exactly one frame; returns ``(payload, remaining bytes)``."""
    if not data:
        raise MalformedFrame("empty input")
    kind = data[0]
    if kind == NULL_KIND:
        return None, bytes(data[1:])
    if kind != TEXT_KIND:
        raise MalformedFrame(f"bad frame kind {kind}")
    if len(data) < 5:
        raise MalformedFrame("truncated length")
    (n,) = _LEN.unpack_from(data, 1)
    end = 5 + n
    if len(data) < end:
        raise MalformedFrame(f"truncated body: want {n} bytes, have {len(data) - 5}")
    try:
        text = bytes(data[5:end]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFrame(f"payload is not UTF-8: {exc}") from None
    return text, bytes(data[end:])


@dataclass
class Channel:
    """A connected socket speaking frames, with a per-operation deadline.

    Every frame sent or received is appended to ``log`` as ``(">", payload)``
    or ``("<", payload)``.
    """

    sock: socket.socket
    deadline: float = DEFAULT_DEADLINE
    name: str = ""
    log: list = field(default_factory=list)
    _buf: bytearray = field(default_factory=bytearray)

    def __post_init__(self):
        self.sock.settimeout(self.deadline)

    def _fill(self, n: int) -> None:
        while len(self._buf) < n:
            try:
                chunk = self.sock.recv(max(4096, n - len(self._buf)))
            except (socket.timeout, TimeoutError):
                raise PeerTimeout(f"{self.name or 'peer'}: no data within {self.deadline}s") from None
            if not chunk:
                raise PeerClosed(f"{self.name or 'peer'} closed the connection")
            self._buf += chunk

    def recv(self) -> str | None:
        self._fill(1)
        kind = self._buf[0]
        if kind == NULL_KIND:
            del self._buf[:1]
            self.log.append(("<", None))
            return None
        if kind != TEXT_KIND:
            raise MalformedFrame(f"bad frame kind {kind}")
        self._fill(5)
        (n,) = _LEN.unpack_from(self._buf, 1)
        self._fill(5 + n)
        payload, _ = decode_frame(bytes(self._buf[:5 + n]))
        del self._buf[:5 + n]
        self.log.append(("<", payload))
        return payload

    def send(self, payload: str | None) -> None:
        try:
            self.sock.sendall(encode_frame(payload))
        except (socket.timeout, TimeoutError):
            raise PeerTimeout(f"{self.name or 'peer'}: send blocked for {self.deadline}s") from None
        except OSError as exc:
            raise PeerClosed(f"{self.name or 'peer'}: {exc}") from None
        self.log.append((">", payload))

    def finish(self) -> int:
        """Half-close our side, read to EOF and return the count of unread bytes."""
        unread = len(self._buf)
        self._buf.clear()
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        try:
            while True:
                chunk = self.sock.recv(4096)
                if not chunk:
                    break
                unread += len(chunk)
        except (socket.timeout, TimeoutError):
            raise PeerTimeout(f"{self.name or 'peer'}: no EOF within {self.deadline}s") from None
        except OSError:
            pass
        self.close()
        return unread

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def connect(host: str, port: int, deadline: float = DEFAULT_DEADLINE, name: str = "") -> Channel:
    try:
        sock = socket.create_connection((host, port), timeout=deadline)
    except (socket.timeout, TimeoutError):
        raise PeerTimeout(f"connect to {host}:{port} timed out") from None
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return Channel(sock, deadline, name or f"{host}:{port}")


def listen(port: int = 0, host: str = "127.0.0.1") -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def accept(srv: socket.socket, deadline: float = DEFAULT_DEADLINE, name: str = "") -> Channel:
    srv.settimeout(deadline)
    try:
        sock, addr = srv.accept()
    except (socket.timeout, TimeoutError):
        raise PeerTimeout(f"nobody connected within {deadline}s") from None
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return Channel(sock, deadline, name or f"{addr[0]}:{addr[1]}")
