"""Length-prefixed JSON framing with in-process and TCP links.

A frame is a 4-byte big-endian body length followed by the UTF-8 JSON body
of one message.  The host owns one :class:`Link` per guest and drives the
conversation; a guest reacts to each incoming message with zero or more
replies.  The in-process link pushes every message through the same byte
encoding as the socket link, so both produce identical runs.
"""

from __future__ import annotations

import logging
import socket
import struct
from collections import deque
from typing import Callable, Protocol

from .messages import Message, ProtocolError

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 30


class FramingError(ProtocolError):
    pass


class TransportError(RuntimeError):
    """The connection to a peer was lost or could not be established."""


def encode_frame(msg: Message) -> bytes:
    body = msg.encode()
    return HEADER.pack(len(body)) + body


def decode_frame(frame: bytes) -> Message:
    if len(frame) < HEADER.size:
        raise FramingError("frame shorter than its length prefix")
    (n,) = HEADER.unpack_from(frame)
    if n != len(frame) - HEADER.size:
        raise FramingError(f"length prefix says {n} bytes, body has {len(frame) - HEADER.size}")
    return Message.decode(frame[HEADER.size :])


class Link(Protocol):
    def send(self, msg: Message) -> None: ...

    def recv(self) -> Message: ...

    def close(self) -> None: ...


Handler = Callable[[Message], list[Message]]


class InProcLink:
    """Host end of a synchronous channel to a guest handler in the same process.

    ``send`` delivers immediately; the guest's replies are queued in FIFO
    order for ``recv``.
    """

    def __init__(self, handler: Handler):
        self.handler = handler
        self.inbox: deque[bytes] = deque()
        self.closed = False

    def send(self, msg: Message) -> None:
        if self.closed:
            raise TransportError("link is closed")
        delivered = decode_frame(encode_frame(msg))
        for reply in self.handler(delivered):
            self.inbox.append(encode_frame(reply))

    def recv(self) -> Message:
        if not self.inbox:
            raise TransportError("no message pending from peer")
        return decode_frame(self.inbox.popleft())

    def close(self) -> None:
        self.closed = True


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        try:
            chunk = sock.recv(min(n, 1 << 20))
        except OSError as exc:
            raise TransportError(f"connection error: {exc}") from None
        if not chunk:
            raise TransportError("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class SocketLink:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 30.0) -> "SocketLink":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from None
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def send(self, msg: Message) -> None:
        try:
            self.sock.sendall(encode_frame(msg))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from None

    def recv(self) -> Message:
        header = _read_exact(self.sock, HEADER.size)
        (n,) = HEADER.unpack(header)
        if n > MAX_FRAME:
            raise FramingError(f"frame of {n} bytes exceeds limit")
        return decode_frame(header + _read_exact(self.sock, n))

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def listen(host: str, port: int) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def serve(link: SocketLink, handler: Handler, stop_types: frozenset[str] = frozenset({"Shutdown", "Reject"})) -> None:
    """Guest loop: answer every incoming message until a stop message arrives."""
    while True:
        msg = link.recv()
        for reply in handler(msg):
            link.send(reply)
        if msg.type in stop_types:
            return
