"""Delayed authentication of the classical message exchange.

Every frame sent or received is folded into a per-direction transcript
state ``t <- (t + m) * k`` over GF(2^n). At the end of a session each
transcript is masked with fresh one-time-pad bits and the two tags are
exchanged and compared.
"""

from __future__ import annotations

import copy
import json
import threading
from dataclasses import dataclass
from pathlib import Path

from .channel import Channel, ChannelError, Frame, MsgType, PeerAbort, ProtocolError
from .gf2n import FIELD_SIZES, GfElement, bytes_to_blocks, gf_mul, gf_mul_int, horner, int_to_limbs


class InsufficientKeyError(RuntimeError):
    pass


def message_blocks(msg: bytes, n: int):
    """Blocks fed to the hash for one message: padded data blocks, then the byte length."""
    length_block = len(msg).to_bytes(n // 8, "big")
    return bytes_to_blocks(bytes(msg) + b"\x00" * (-len(msg) % (n // 8)) + length_block, n)


@dataclass
class Transcript:
    """Running polynomial-hash state of one message direction."""

    k: GfElement
    t: GfElement = None
    n_blocks: int = 0

    def __post_init__(self):
        if self.t is None:
            self.t = GfElement(0, self.k.n)
        if self.t.n != self.k.n:
            raise ValueError("state and key must live in the same field")

    @property
    def n(self) -> int:
        return self.k.n

    def update(self, msg: bytes) -> "Transcript":
        """Absorb one message in place."""
        n = self.n
        blocks = message_blocks(msg, n)
        # t' = (t + m1)k...: folding t into the first block gives k * Horner(blocks)
        blocks[0] ^= int_to_limbs(self.t.value, n)
        self.t = GfElement(gf_mul_int(horner(blocks, self.k.value, n), self.k.value, n), n)
        self.n_blocks += len(blocks)
        return self


def transcript_update(tr: Transcript, msg: bytes) -> Transcript:
    """Functional form of :meth:`Transcript.update`; ``tr`` is left untouched."""
    return copy.copy(tr).update(msg)


def poly_hash(data: bytes, key: int, n: int) -> int:
    """Keyed polynomial hash of ``data`` (the transcript rule from a zero state)."""
    return Transcript(GfElement(key, n)).update(data).t.value


@dataclass(frozen=True)
class LedgerEntry:
    offset: int
    length: int
    purpose: str


class AuthKeys:
    """Pre-shared key store with an append-only consumption ledger.

    Both endpoints hold the same material and consume it in the same
    order, so allocations line up without coordination. Offsets and
    lengths are in bytes.
    """

    def __init__(self, material: bytes, ledger_path: str | Path | None = None):
        self._material = bytearray(material)
        self._lock = threading.Lock()
        self.ledger: list[LedgerEntry] = []
        self.ledger_path = Path(ledger_path) if ledger_path else None
        if self.ledger_path and self.ledger_path.exists():
            for line in self.ledger_path.read_text().splitlines():
                if line.strip():
                    self.ledger.append(LedgerEntry(**json.loads(line)))

    @classmethod
    def from_file(cls, path, ledger_path=None) -> "AuthKeys":
        path = Path(path)
        return cls(path.read_bytes(), ledger_path or path.with_name(path.name + ".ledger"))

    @property
    def offset(self) -> int:
        last = self.ledger[-1] if self.ledger else None
        return last.offset + last.length if last else 0

    @property
    def remaining_bytes(self) -> int:
        return len(self._material) - self.offset

    def take(self, nbits: int, purpose: str) -> int:
        """Consume ``nbits`` (multiple of 8) of key material, returned as an int."""
        if nbits % 8:
            raise ValueError("key material is consumed in whole bytes")
        nbytes = nbits // 8
        with self._lock:
            off = self.offset
            if off + nbytes > len(self._material):
                raise InsufficientKeyError(
                    f"insufficient pre-shared key: need {nbytes} bytes for {purpose}, "
                    f"{len(self._material) - off} left")
            entry = LedgerEntry(off, nbytes, purpose)
            self.ledger.append(entry)
            if self.ledger_path:
                with open(self.ledger_path, "a") as f:
                    f.write(json.dumps(entry.__dict__) + "\n")
            return int.from_bytes(self._material[off: off + nbytes], "big")

    def replenish(self, material: bytes):
        """Append fresh shared key material (e.g. from a distilled final key)."""
        with self._lock:
            self._material.extend(material)


def finalize_mac(tr: Transcript, keys: AuthKeys, purpose: str = "otp") -> int:
    """One-time-pad the transcript state; consumes n fresh key bits."""
    k_otp = keys.take(tr.n, purpose)
    return tr.t.value ^ k_otp


class Link:
    """Protocol-level view of a channel that feeds both transcripts.

    Outgoing frames are absorbed into ``tr_out`` and incoming frames into
    ``tr_in`` before their payload is handed to the caller. ABORT frames
    raise :class:`PeerAbort`.
    """

    def __init__(self, channel: Channel, tr_out: Transcript | None = None,
                 tr_in: Transcript | None = None, timeout: float | None = None):
        self.channel = channel
        self.tr_out = tr_out
        self.tr_in = tr_in
        self.timeout = timeout
        self.sent = 0
        self.received = 0

    def send(self, mtype: MsgType, payload: bytes = b""):
        raw = self.channel.send_frame(Frame(mtype, payload))
        if self.tr_out is not None and mtype not in (MsgType.AUTH_TAG, MsgType.ABORT):
            self.tr_out.update(raw)
        self.sent += 1

    def recv(self, expected: MsgType) -> bytes:
        frame, raw = self.channel.recv_frame(self.timeout)
        if frame.type == MsgType.ABORT:
            raise PeerAbort(frame.payload.decode(errors="replace"))
        if frame.type != expected:
            raise ProtocolError(f"expected {expected.name}, got {frame.type.name}")
        if self.tr_in is not None and frame.type != MsgType.AUTH_TAG:
            self.tr_in.update(raw)
        self.received += 1
        return frame.payload

    def abort(self, reason: str):
        try:
            self.channel.send_frame(Frame(MsgType.ABORT, reason.encode()[:1024]))
        except ChannelError:
            pass


def verify_exchange(tag_out: int, tag_in_expected: int, link: Link, n: int) -> bool:
    """Swap tags with the peer; true iff both directions match.

    The peer's outgoing tag must equal our incoming tag and vice versa.
    Transport errors and timeouts count as authentication failure.
    """
    nb = n // 8
    try:
        link.send(MsgType.AUTH_TAG, tag_out.to_bytes(nb, "big") + tag_in_expected.to_bytes(nb, "big"))
        payload = link.recv(MsgType.AUTH_TAG)
    except (ChannelError, ProtocolError, PeerAbort):
        return False
    if len(payload) != 2 * nb:
        return False
    peer_out = int.from_bytes(payload[:nb], "big")
    peer_in = int.from_bytes(payload[nb:], "big")
    return peer_out == tag_in_expected and peer_in == tag_out


__all__ = [
    "FIELD_SIZES", "GfElement", "gf_mul", "Transcript", "transcript_update", "poly_hash",
    "AuthKeys", "LedgerEntry", "InsufficientKeyError", "finalize_mac", "verify_exchange",
    "Link", "message_blocks",
]
