"""Cascade information reconciliation.

Alice is the reference: only Bob's key changes. Each pass shuffles the key
with a shared permutation, splits it into blocks, and Alice announces all
block parities in one message. Bob bisects every mismatched block,
asking for the parity of left halves in batches, and corrects the located
bits. A corrected bit flips the parity of the blocks containing it in the
earlier passes; those blocks are bisected in turn (the cascade step).

Bisections are run in waves of blocks from a single pass, which are
disjoint, so they never interfere with each other and no flip happens
while a bisection is in flight.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .auth import Link
from .channel import MsgType, ProtocolError
from .core import BitBlock, Party

MAX_K1_NOISELESS = 1 << 16


class CascadeError(RuntimeError):
    pass


@dataclass(frozen=True)
class CascadeConfig:
    passes: int = 12
    shuffle_seed: int = 0
    k1: int | None = None

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("cascade needs at least one pass")
        if self.k1 is not None and self.k1 < 2:
            raise ValueError("block size must be at least 2")

    def first_block_size(self, n: int, e_est: float) -> int:
        if self.k1 is not None:
            k = self.k1
        elif e_est <= 0:
            k = MAX_K1_NOISELESS
        else:
            k = max(math.ceil(0.73 / e_est), 8)
        return max(2, min(k, -(-n // 2)))

    def block_sizes(self, n: int, e_est: float) -> list[int]:
        k1 = self.first_block_size(n, e_est)
        # beyond half the key a block cannot separate an error pair
        cap = max(2, -(-n // 2))
        return [max(2, min(k1 << i, cap)) for i in range(self.passes)]


@dataclass(frozen=True)
class ReconcileOutcome:
    key: BitBlock
    n_disclosed: int
    n_corrected: int
    transcript_msgs: int


class _Pass:
    """Shuffle and block layout of one pass, identical on both sides."""

    def __init__(self, n: int, k: int, seed: int, index: int):
        rng = np.random.default_rng([seed, index])
        self.perm = rng.permutation(n)
        self.inv = np.empty(n, dtype=np.int64)
        self.inv[self.perm] = np.arange(n)
        starts = np.arange(0, n, max(k, 1), dtype=np.int64)
        if len(starts) > 1 and n - starts[-1] == 1:
            starts = starts[:-1]
        self.starts = starts
        self.ends = np.append(starts[1:], n) if n else starts.copy()

    def block_of(self, positions: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.starts, self.inv[positions], side="right") - 1

    def prefix(self, key: np.ndarray) -> np.ndarray:
        """Prefix XOR of the permuted key; parity(lo, hi) = pre[hi] ^ pre[lo]."""
        pre = np.zeros(key.size + 1, dtype=np.uint8)
        np.bitwise_xor.accumulate(key[self.perm], out=pre[1:])
        return pre


def _layout(n: int, e_est: float, cfg: CascadeConfig) -> list[_Pass]:
    return [_Pass(n, k, cfg.shuffle_seed, i) for i, k in enumerate(cfg.block_sizes(n, e_est))]


def bisect_ranges(lo: np.ndarray, hi: np.ndarray, own_parity: Callable, ask: Callable):
    """Locate one error in each of several disjoint odd-parity ranges.

    ``own_parity(lo, hi)`` gives the local parities, ``ask(lo, hi)`` the
    peer's (one disclosure per range). Returns (positions, disclosures);
    positions index the same space as ``lo``/``hi``.
    """
    lo = np.asarray(lo, dtype=np.int64).copy()
    hi = np.asarray(hi, dtype=np.int64).copy()
    asked = 0
    while True:
        active = np.nonzero(hi - lo > 1)[0]
        if active.size == 0:
            return lo, asked
        a_lo, a_hi = lo[active], hi[active]
        mid = a_lo + (a_hi - a_lo) // 2
        theirs = ask(a_lo, mid)
        asked += active.size
        go_left = own_parity(a_lo, mid) != theirs
        hi[active] = np.where(go_left, mid, a_hi)
        lo[active] = np.where(go_left, a_lo, mid)


def binary_search_block(lo: int, hi: int, own_parity: Callable, ask: Callable) -> tuple[int, int]:
    """Bisect one block known to hold an odd number of errors.

    Returns (error index, parity exchanges); a 1-bit block needs none.
    Raises :class:`CascadeError` if the block parities actually agree.
    """
    if hi - lo < 1:
        raise ValueError("empty range")
    if own_parity(np.array([lo]), np.array([hi]))[0] == ask(np.array([lo]), np.array([hi]))[0]:
        raise CascadeError("parity oracle inconsistent: block has an even number of errors")
    pos, asked = bisect_ranges(np.array([lo]), np.array([hi]), own_parity, ask)
    return int(pos[0]), asked


# --- wire helpers ------------------------------------------------------------

_REQ_HEAD = struct.Struct("<BB")
_FLAG_REQUEST, _FLAG_DONE = 0, 1


def _pack_bits(bits: np.ndarray) -> bytes:
    return struct.pack("<I", bits.size) + np.packbits(bits.astype(np.uint8)).tobytes()


def _unpack_bits(payload: bytes, expected: int) -> np.ndarray:
    if len(payload) < 4:
        raise ProtocolError("short parity message")
    (count,) = struct.unpack("<I", payload[:4])
    if count != expected or len(payload) != 4 + (count + 7) // 8:
        raise ProtocolError(f"parity message carries {count} bits, expected {expected}")
    # padding bits of the last byte are ignored
    return np.unpackbits(np.frombuffer(payload[4:], dtype=np.uint8))[:count]


def _pack_request(pass_index: int, lo: np.ndarray, hi: np.ndarray) -> bytes:
    pairs = np.empty((lo.size, 2), dtype="<u4")
    pairs[:, 0] = lo
    pairs[:, 1] = hi
    return _REQ_HEAD.pack(_FLAG_REQUEST, pass_index) + pairs.tobytes()


def _unpack_request(payload: bytes, n: int, passes: int):
    if len(payload) < 2 or (len(payload) - 2) % 8:
        raise ProtocolError("malformed cascade request")
    flag, q = _REQ_HEAD.unpack(payload[:2])
    if flag == _FLAG_DONE:
        return None, None, None
    if flag != _FLAG_REQUEST or q >= passes:
        raise ProtocolError("malformed cascade request")
    pairs = np.frombuffer(payload[2:], dtype="<u4").reshape(-1, 2).astype(np.int64)
    lo, hi = pairs[:, 0], pairs[:, 1]
    if np.any(lo >= hi) or np.any(hi > n):
        raise ProtocolError("cascade request range out of bounds")
    return q, lo, hi


# --- Bob's engine --------------------------------------------------------------


class _BobEngine:
    def __init__(self, key: np.ndarray, layout: list[_Pass], announce: Callable, ask: Callable):
        self.key = key
        self.layout = layout
        self.announce = announce      # pass index -> Alice's block parities
        self.ask = ask                # (pass index, lo, hi) -> Alice's parities
        self.disclosed = 0
        self.corrected = 0
        self.mismatch: list[np.ndarray] = []
        self.touched = np.zeros(key.size, dtype=bool)

    def _wave(self, q: int, blocks: np.ndarray):
        p = self.layout[q]
        pre = p.prefix(self.key)

        def own(lo, hi):
            return pre[hi] ^ pre[lo]

        def ask(lo, hi):
            return self.ask(q, lo, hi)

        where, asked = bisect_ranges(p.starts[blocks], p.ends[blocks], own, ask)
        self.disclosed += asked
        flips = p.perm[where]
        # honest parities only ever point at real errors, so a bit is fixed once;
        # a repeat means inconsistent (tampered) parities and would cycle forever
        if self.touched[flips].any():
            raise CascadeError("inconsistent parities: a bit was corrected twice")
        self.touched[flips] = True
        self.key[flips] ^= 1
        self.corrected += flips.size
        for r in range(len(self.mismatch)):
            np.bitwise_xor.at(self.mismatch[r], self.layout[r].block_of(flips), 1)

    def run(self):
        for q, p in enumerate(self.layout):
            alice = self.announce(q)
            self.disclosed += alice.size
            pre = p.prefix(self.key)
            mine = pre[p.ends] ^ pre[p.starts]
            self.mismatch.append((mine != alice).astype(np.uint8))
            while True:
                # earliest pass with odd blocks first: its blocks are the smallest
                todo = next((r for r in range(q + 1) if self.mismatch[r].any()), None)
                if todo is None:
                    break
                self._wave(todo, np.nonzero(self.mismatch[todo])[0])


def reconcile(role: Party, key: BitBlock, e_est: float, cfg: CascadeConfig, link: Link) -> ReconcileOutcome:
    """Run one side of cascade over ``link``; both sides must use the same ``e_est`` and ``cfg``."""
    if not 0.0 <= e_est < 0.5:
        raise ValueError(f"error estimate must lie in [0, 0.5), got {e_est}")
    n = len(key)
    msgs_before = link.sent + link.received
    # length check: both sides announce n before the first pass
    link.send(MsgType.CASCADE_ACK, struct.pack("<BBI", 2, 0, n))
    peer = link.recv(MsgType.CASCADE_ACK)
    if len(peer) != 6 or struct.unpack("<BBI", peer)[2] != n:
        raise CascadeError(f"key length mismatch with peer (local {n})")
    layout = _layout(n, e_est, cfg)
    if role is Party.ALICE:
        bits = key.bits
        prefixes = [p.prefix(bits) for p in layout]
        disclosed = 0
        for q, p in enumerate(layout):
            pre = prefixes[q]
            link.send(MsgType.CASCADE_PARITY, _pack_bits(pre[p.ends] ^ pre[p.starts]))
            disclosed += p.starts.size
            while True:
                r, lo, hi = _unpack_request(link.recv(MsgType.CASCADE_ACK), n, len(layout))
                if r is None:
                    break
                if r > q:
                    raise ProtocolError("request for a pass that has not started")
                link.send(MsgType.CASCADE_PARITY, _pack_bits(prefixes[r][hi] ^ prefixes[r][lo]))
                disclosed += lo.size
        return ReconcileOutcome(key, disclosed, 0, link.sent + link.received - msgs_before)

    work = key.bits.copy()

    def announce(q):
        if q > 0:
            # tells Alice the previous pass is finished
            link.send(MsgType.CASCADE_ACK, _REQ_HEAD.pack(_FLAG_DONE, q - 1))
        return _unpack_bits(link.recv(MsgType.CASCADE_PARITY), layout[q].starts.size)

    def ask(q, lo, hi):
        link.send(MsgType.CASCADE_ACK, _pack_request(q, lo, hi))
        return _unpack_bits(link.recv(MsgType.CASCADE_PARITY), lo.size)

    engine = _BobEngine(work, layout, announce, ask)
    engine.run()
    link.send(MsgType.CASCADE_ACK, _REQ_HEAD.pack(_FLAG_DONE, len(layout) - 1))
    return ReconcileOutcome(BitBlock._wrap(work), engine.disclosed, engine.corrected,
                            link.sent + link.received - msgs_before)


def reconcile_local(key_a: BitBlock, key_b: BitBlock, e_est: float, cfg: CascadeConfig) -> ReconcileOutcome:
    """Both roles in-process without a channel; same disclosures as :func:`reconcile`."""
    if len(key_a) != len(key_b):
        raise CascadeError("key length mismatch")
    n = len(key_a)
    layout = _layout(n, e_est, cfg)
    alice_pre = [p.prefix(key_a.bits) for p in layout]

    def announce(q):
        p = layout[q]
        return alice_pre[q][p.ends] ^ alice_pre[q][p.starts]

    def ask(q, lo, hi):
        return alice_pre[q][hi] ^ alice_pre[q][lo]

    engine = _BobEngine(key_b.bits.copy(), layout, announce, ask)
    engine.run()
    return ReconcileOutcome(BitBlock._wrap(engine.key), engine.disclosed, engine.corrected, 0)
