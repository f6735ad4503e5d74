"""Framed classical channel: wire codec plus loopback and socket bindings.

Frame layout: 4-byte big-endian payload length, 1-byte message type,
payload. A socket connection starts with a 5-byte HELLO prologue
(``b"QKDP"`` + protocol version) before any frame.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable

PROTOCOL_VERSION = 1
HELLO = b"QKDP" + bytes([PROTOCOL_VERSION])
MAX_PAYLOAD = 64 * 1024 * 1024
HEADER = struct.Struct(">IB")


class MsgType(enum.IntEnum):
    SYNC_DATA = 1
    SIFT_BASES = 2
    ERR_SAMPLE = 3
    CASCADE_PARITY = 4
    CASCADE_ACK = 5
    CONFIRM_HASH = 6
    PA_SEED = 7
    DISCLOSE_COUNT = 8
    AUTH_TAG = 9
    ABORT = 10


class ChannelError(Exception):
    """Transport failure (closed peer, malformed stream)."""


class FrameError(ChannelError):
    pass


class ChannelTimeout(ChannelError):
    pass


class ProtocolError(Exception):
    """Peer sent a frame that does not fit the current protocol step."""


class PeerAbort(Exception):
    """Peer announced an abort; ``args[0]`` carries its reason."""


@dataclass(frozen=True)
class Frame:
    type: MsgType
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(len(frame.payload), int(frame.type)) + frame.payload


def _parse_header(header: bytes) -> tuple[int, MsgType]:
    length, code = HEADER.unpack(header)
    try:
        mtype = MsgType(code)
    except ValueError:
        raise FrameError(f"unknown message type {code}") from None
    if length > MAX_PAYLOAD:
        raise FrameError(f"declared length {length} exceeds maximum {MAX_PAYLOAD}")
    return length, mtype


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame; the buffer length must match the header."""
    if len(data) < HEADER.size:
        raise FrameError("truncated frame header")
    length, mtype = _parse_header(data[: HEADER.size])
    if len(data) - HEADER.size != length:
        raise FrameError(f"declared length {length} != actual {len(data) - HEADER.size}")
    return Frame(mtype, bytes(data[HEADER.size:]))


class Channel:
    """Reliable ordered duplex frame channel.

    ``taps`` receive ``(direction, raw_frame_bytes)`` for every frame sent
    or received, which tests use to sniff the wire.
    """

    timeout: float = 30.0

    def __init__(self):
        self.taps: list[Callable[[str, bytes], None]] = []

    def _tap(self, direction: str, raw: bytes):
        for tap in self.taps:
            tap(direction, raw)

    def send_frame(self, frame: Frame) -> bytes:
        raw = encode_frame(frame)
        self._send_raw(raw)
        self._tap("out", raw)
        return raw

    def recv_frame(self, timeout: float | None = None) -> tuple[Frame, bytes]:
        raw = self._recv_raw(self.timeout if timeout is None else timeout)
        frame = decode_frame(raw)
        self._tap("in", raw)
        return frame, raw

    def _send_raw(self, raw: bytes):
        raise NotImplementedError

    def _recv_raw(self, timeout: float) -> bytes:
        raise NotImplementedError

    def close(self):
        pass


class LoopbackChannel(Channel):
    """In-memory endpoint; create connected pairs with :meth:`pair`."""

    _CLOSED = object()

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, name: str,
                 tamper: Callable[[str, bytes], bytes] | None = None):
        super().__init__()
        self._inbox = inbox
        self._outbox = outbox
        self.name = name
        self._tamper = tamper

    @classmethod
    def pair(cls, tamper: Callable[[str, bytes], bytes] | None = None):
        """Two connected endpoints. ``tamper(sender_name, raw)`` may rewrite frames in transit."""
        ab, ba = queue.Queue(), queue.Queue()
        return cls(ba, ab, "A", tamper), cls(ab, ba, "B", tamper)

    def _send_raw(self, raw: bytes):
        wire = self._tamper(self.name, raw) if self._tamper else raw
        self._outbox.put(wire)

    def _recv_raw(self, timeout: float) -> bytes:
        try:
            raw = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ChannelTimeout(f"no frame within {timeout} s") from None
        if raw is self._CLOSED:
            raise ChannelError("peer closed the channel")
        return raw

    def close(self):
        self._outbox.put(self._CLOSED)


class SocketChannel(Channel):
    """Frame channel over a connected stream socket."""

    def __init__(self, sock: socket.socket, timeout: float = 30.0):
        super().__init__()
        self.sock = sock
        self.timeout = timeout
        self._lock = threading.Lock()

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            try:
                chunk = self.sock.recv(min(n, 1 << 20))
            except socket.timeout:
                raise ChannelTimeout("socket read timed out") from None
            if not chunk:
                raise ChannelError("connection closed by peer")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def _send_raw(self, raw: bytes):
        with self._lock:
            self.sock.sendall(raw)

    def _recv_raw(self, timeout: float) -> bytes:
        self.sock.settimeout(timeout)
        header = self._recv_exact(HEADER.size)
        length, _ = _parse_header(header)
        return header + self._recv_exact(length)

    def hello(self):
        self.sock.settimeout(self.timeout)
        self.sock.sendall(HELLO)
        peer = self._recv_exact(len(HELLO))
        if peer[:4] != HELLO[:4]:
            raise FrameError(f"bad HELLO prologue {peer!r}")
        if peer[4] != PROTOCOL_VERSION:
            raise FrameError(f"protocol version mismatch: peer {peer[4]}, local {PROTOCOL_VERSION}")

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 30.0) -> "SocketChannel":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ChannelError(f"cannot connect to {host}:{port}: {exc}") from exc
        ch = cls(sock, timeout)
        ch.hello()
        return ch

    @classmethod
    def accept(cls, host: str, port: int, timeout: float = 30.0,
               ready: Callable[[int], None] | None = None) -> "SocketChannel":
        """Listen on ``host:port`` and accept one peer. ``ready(port)`` fires once listening."""
        with socket.create_server((host, port)) as srv:
            srv.settimeout(timeout)
            if ready:
                ready(srv.getsockname()[1])
            try:
                sock, _ = srv.accept()
            except socket.timeout:
                raise ChannelTimeout(f"no peer connected to {host}:{port} within {timeout} s") from None
        ch = cls(sock, timeout)
        ch.hello()
        return ch

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass
