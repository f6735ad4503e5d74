"""Key buffer with an ETSI GS QKD 004 style delivery interface.

Adapted use case: one session, one client, one link. Each endpoint runs
its own store; both receive the same final keys in the same order, so
carving keys from the front of the buffer yields identical key ids and
bytes on both sides without extra coordination.

Key ids are the first 16 bytes of SHA-256 over the id of the source key
and the carved bit range. Source keys pushed by a QKD session get ids
derived from the session nonce and the key index.
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

AVAILABLE, RESERVED, CONSUMED = "available", "reserved", "consumed"
OK, STARVATION = "ok", "starvation"
MAX_REQUEST = 1 << 20


class KmsError(RuntimeError):
    pass


def session_key_id(nonce: bytes, index: int) -> bytes:
    return hashlib.sha256(b"fsqkd-session" + nonce + index.to_bytes(8, "big")).digest()[:16]


def carve_id(source_id: bytes, offset: int, length: int) -> bytes:
    return hashlib.sha256(b"fsqkd-carve" + source_id + struct.pack(">QQ", offset, length)).digest()[:16]


@dataclass
class StoredKey:
    """A key pushed by a session; ``bits`` is an unpacked uint8 array."""

    key_id: bytes
    bits: np.ndarray
    created: float
    status: str = AVAILABLE


@dataclass(frozen=True)
class _Piece:
    order: int      # push index of the source key
    offset: int     # bit offset inside the source key
    bits: np.ndarray


@dataclass
class KmsSession:
    ksid: str
    source: str
    destination: str
    qos: dict = field(default_factory=dict)
    reserved: list = field(default_factory=list)


@dataclass(frozen=True)
class KeyResult:
    status: str
    key_id: bytes | None = None
    key: bytes | None = None


class KeyStore:
    """Serialized in-memory key buffer for one link.

    ``link`` names the two endpoints; sessions may be opened in either
    direction between them.
    """

    def __init__(self, local: str = "alice", peer: str = "bob"):
        self.link = frozenset((local, peer))
        self._lock = threading.RLock()
        self.sources: list[StoredKey] = []
        self._pool: list[_Piece] = []
        self._reserved: dict[bytes, list[_Piece]] = {}
        self._consumed: dict[bytes, int] = {}
        self._sessions: dict[str, KmsSession] = {}
        self._opened = 0
        self.total_bits = 0

    # --- producer side ---------------------------------------------------

    def push(self, bits, key_id: bytes) -> StoredKey:
        """Append a final key (bit array or BitBlock) under ``key_id``."""
        bits = np.array(getattr(bits, "bits", bits), dtype=np.uint8).reshape(-1)
        with self._lock:
            if any(s.key_id == key_id for s in self.sources):
                raise KmsError(f"duplicate key id {key_id.hex()}")
            sk = StoredKey(key_id, bits, time.time())
            order = len(self.sources)
            self.sources.append(sk)
            if bits.size:
                self._pool.append(_Piece(order, 0, bits))
            self.total_bits += bits.size
            return sk

    # --- accounting ------------------------------------------------------

    @property
    def available_bits(self) -> int:
        with self._lock:
            return sum(p.bits.size for p in self._pool)

    @property
    def reserved_bits(self) -> int:
        with self._lock:
            return sum(p.bits.size for ps in self._reserved.values() for p in ps)

    @property
    def consumed_bits(self) -> int:
        with self._lock:
            return sum(self._consumed.values())

    def totals(self) -> dict:
        with self._lock:
            return {AVAILABLE: self.available_bits, RESERVED: self.reserved_bits,
                    CONSUMED: self.consumed_bits, "pushed": self.total_bits}

    # --- sessions --------------------------------------------------------

    def open_connect(self, source: str, destination: str, qos: dict | None = None) -> str:
        with self._lock:
            if frozenset((source, destination)) != self.link or source == destination:
                raise KmsError(f"unknown link {source} -> {destination}")
            if self._sessions:
                raise KmsError("busy: a session is already open on this link")
            self._opened += 1
            ksid = hashlib.sha256(f"{source}|{destination}|{self._opened}".encode()).hexdigest()[:32]
            self._sessions[ksid] = KmsSession(ksid, source, destination, dict(qos or {}))
            return ksid

    def _session(self, ksid: str) -> KmsSession:
        try:
            return self._sessions[ksid]
        except KeyError:
            raise KmsError(f"unknown or closed session {ksid}") from None

    def close(self, ksid: str) -> None:
        """Close ``ksid``; keys it reserved but never fetched become available again."""
        with self._lock:
            s = self._session(ksid)
            for kid in s.reserved:
                self._pool.extend(self._reserved.pop(kid, []))
            self._pool.sort(key=lambda p: (p.order, p.offset))
            self._merge_pool()
            del self._sessions[ksid]

    def _merge_pool(self):
        merged: list[_Piece] = []
        for p in self._pool:
            last = merged[-1] if merged else None
            if last and last.order == p.order and last.offset + last.bits.size == p.offset:
                merged[-1] = _Piece(last.order, last.offset, np.concatenate([last.bits, p.bits]))
            else:
                merged.append(p)
        self._pool = merged

    def _peek(self, length: int):
        """Pieces covering the first ``length`` available bits and their id."""
        first = self._pool[0]
        kid = carve_id(self.sources[first.order].key_id, first.offset, length)
        taken, need, i = [], length, 0
        while need:
            p = self._pool[i]
            if p.bits.size <= need:
                taken.append(p)
                need -= p.bits.size
                i += 1
            else:
                taken.append(_Piece(p.order, p.offset, p.bits[:need]))
                need = 0
        return kid, taken

    def _carve(self, length: int) -> tuple[bytes, list[_Piece]]:
        kid, taken = self._peek(length)
        rest, cut = [], length
        for p in self._pool:
            if cut >= p.bits.size:
                cut -= p.bits.size
                continue
            rest.append(_Piece(p.order, p.offset + cut, p.bits[cut:]) if cut else p)
            cut = 0
        self._pool = rest
        return kid, taken

    def _check_length(self, length: int):
        if length <= 0 or length % 8:
            raise KmsError(f"key length must be a positive multiple of 8 bits, got {length}")

    def reserve(self, ksid: str, length: int) -> KeyResult:
        """Set aside ``length`` bits under a new key id without delivering them."""
        self._check_length(length)
        with self._lock:
            s = self._session(ksid)
            if self.available_bits < length:
                return KeyResult(STARVATION)
            kid, pieces = self._carve(length)
            self._reserved[kid] = pieces
            s.reserved.append(kid)
            return KeyResult(OK, kid)

    def get_key(self, ksid: str, length: int, key_id: bytes | None = None) -> KeyResult:
        """Deliver ``length`` bits and mark them consumed.

        Without ``key_id`` the next bits of the buffer are carved. With a
        ``key_id`` (the peer already fetched it) the reserved key of that id,
        or the next carve if it has that id, is delivered. Too little key
        gives a ``starvation`` status and leaves the buffer unchanged.
        """
        self._check_length(length)
        with self._lock:
            s = self._session(ksid)
            if key_id is not None and key_id in self._reserved:
                pieces = self._reserved.pop(key_id)
                if key_id in s.reserved:
                    s.reserved.remove(key_id)
                if sum(p.bits.size for p in pieces) != length:
                    self._reserved[key_id] = pieces
                    raise KmsError("length does not match the reserved key")
                kid = key_id
            else:
                if key_id is not None and key_id in self._consumed:
                    raise KmsError(f"key {key_id.hex()} was already delivered")
                if self.available_bits < length:
                    return KeyResult(STARVATION)
                if key_id is not None and self._peek(length)[0] != key_id:
                    raise KmsError(f"key {key_id.hex()} is not the next key in this buffer")
                kid, pieces = self._carve(length)
            self._consumed[kid] = length
            bits = np.concatenate([p.bits for p in pieces])
            return KeyResult(OK, kid, np.packbits(bits).tobytes())

    # --- snapshot ---------------------------------------------------------

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "link": sorted(self.link),
                "sources": [{"key_id": s.key_id.hex(), "created": s.created,
                             "bits": base64.b64encode(np.packbits(s.bits).tobytes()).decode(),
                             "n": int(s.bits.size)} for s in self.sources],
                "pool": [[p.order, p.offset, int(p.bits.size)] for p in self._pool],
                "consumed": {k.hex(): v for k, v in self._consumed.items()},
            }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.snapshot(), f)

    @classmethod
    def load(cls, path) -> "KeyStore":
        with open(path) as f:
            snap = json.load(f)
        store = cls(*snap["link"])
        for s in snap["sources"]:
            bits = np.unpackbits(np.frombuffer(base64.b64decode(s["bits"]), np.uint8))[: s["n"]]
            store.sources.append(StoredKey(bytes.fromhex(s["key_id"]), bits, s["created"]))
            store.total_bits += int(s["n"])
        store._pool = [_Piece(o, off, store.sources[o].bits[off: off + n]) for o, off, n in snap["pool"]]
        store._consumed = {bytes.fromhex(k): v for k, v in snap["consumed"].items()}
        return store


# --- local socket API --------------------------------------------------------


def _send_msg(sock: socket.socket, obj: dict):
    data = json.dumps(obj).encode()
    sock.sendall(struct.pack(">I", len(data)) + data)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return buf


def _recv_msg(sock: socket.socket) -> dict:
    (n,) = struct.unpack(">I", _recv_exact(sock, 4))
    if n > MAX_REQUEST:
        raise KmsError(f"request of {n} bytes exceeds {MAX_REQUEST}")
    return json.loads(_recv_exact(sock, n))


def handle_request(store: KeyStore, req: dict) -> dict:
    """Execute one JSON request against ``store``."""
    op = req.get("op")
    try:
        if op == "open_connect":
            return {"status": OK, "ksid": store.open_connect(req["source"], req["destination"], req.get("qos"))}
        if op == "get_key":
            kid = bytes.fromhex(req["key_id"]) if req.get("key_id") else None
            r = store.get_key(req["ksid"], int(req["length"]), kid)
            if r.status != OK:
                return {"status": r.status}
            return {"status": OK, "key_id": r.key_id.hex(), "key_b64": base64.b64encode(r.key).decode()}
        if op == "close":
            store.close(req["ksid"])
            return {"status": OK}
        if op == "status":
            return {"status": OK, **store.totals()}
        return {"status": "error", "error": f"unknown op {op!r}"}
    except (KmsError, KeyError, ValueError, TypeError) as exc:
        return {"status": "error", "error": str(exc)}


class KmsServer(socketserver.ThreadingTCPServer):
    """Local TCP server speaking length-prefixed JSON."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, store: KeyStore, host: str = "127.0.0.1", port: int = 0):
        self.store = store

        class Handler(socketserver.BaseRequestHandler):
            def handle(self_h):
                try:
                    while True:
                        req = _recv_msg(self_h.request)
                        _send_msg(self_h.request, handle_request(store, req))
                except (ConnectionError, KmsError, json.JSONDecodeError, struct.error):
                    pass

        super().__init__((host, port), Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> threading.Thread:
        th = threading.Thread(target=self.serve_forever, daemon=True)
        th.start()
        return th


class KmsClient:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def call(self, **req) -> dict:
        _send_msg(self.sock, req)
        return _recv_msg(self.sock)

    def open_connect(self, source, destination, qos=None) -> dict:
        return self.call(op="open_connect", source=source, destination=destination, qos=qos or {})

    def get_key(self, ksid, length, key_id: str | None = None) -> dict:
        return self.call(op="get_key", ksid=ksid, length=length, key_id=key_id)

    def close_session(self, ksid) -> dict:
        return self.call(op="close", ksid=ksid)

    def close(self):
        self.sock.close()
