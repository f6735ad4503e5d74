"""Final key length, correction confirmation and Toeplitz privacy amplification."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .auth import Link, poly_hash
from .channel import MsgType, ProtocolError
from .core import BitBlock, Party
from .ntt import MAX_LOG, convolve

CONFIRM_BITS = 96
DEFAULT_N_MAR = 100


def binary_entropy(e: float) -> float:
    if e <= 0.0 or e >= 1.0:
        return 0.0
    return -e * math.log2(e) - (1.0 - e) * math.log2(1.0 - e)


def tau(e: float) -> float:
    """Key compression factor: 1 for e = 0, 1 - h(e) on (0, 0.5], 0 above."""
    if not 0.0 <= e <= 1.0:
        raise ValueError(f"QBER must lie in [0, 1], got {e}")
    if e == 0.0:
        return 1.0
    if e > 0.5:
        return 0.0
    return 1.0 - binary_entropy(e)


@dataclass(frozen=True)
class FinalKeyParams:
    n_in: int
    e: float
    n_dis: int
    n_mar: int = DEFAULT_N_MAR

    def __post_init__(self):
        if min(self.n_in, self.n_dis, self.n_mar) < 0:
            raise ValueError("bit counts must be non-negative")
        if not 0.0 <= self.e <= 1.0:
            raise ValueError("QBER must lie in [0, 1]")


def final_length(p: FinalKeyParams) -> int:
    """max(floor(N_in * tau(e)) - N_dis - N_mar, 0)."""
    return max(math.floor(p.n_in * tau(p.e)) - p.n_dis - p.n_mar, 0)


# --- Toeplitz hashing --------------------------------------------------------

_CHUNK = 1 << (MAX_LOG - 2)


def _as_bits(x) -> np.ndarray:
    if isinstance(x, BitBlock):
        return x.bits
    return np.asarray(x, dtype=np.uint8)


def toeplitz_naive(key, seed, n_fin: int) -> np.ndarray:
    """Reference product T @ key over GF(2), T[i, j] = seed[n_fin - 1 + j - i]."""
    key = _as_bits(key).astype(np.int64)
    seed = _as_bits(seed).astype(np.int64)
    n_in = key.size
    i = np.arange(n_fin)[:, None]
    j = np.arange(n_in)[None, :]
    T = seed[n_fin - 1 + j - i]
    return ((T @ key) & 1).astype(np.uint8)


def _toeplitz_conv(key: np.ndarray, seed: np.ndarray, n_fin: int) -> np.ndarray:
    n_in = key.size
    # out[i] = sum_j seed[n_fin-1+j-i] key[j] = conv(seed, key[::-1])[n_in+n_fin-2-i]
    c = convolve(seed.astype(np.uint64), key[::-1].astype(np.uint64))
    return (c[n_in + n_fin - 2 - np.arange(n_fin)] & np.uint64(1)).astype(np.uint8)


def toeplitz_pa(key, seed, n_fin: int) -> BitBlock:
    """Compress ``key`` (N_in bits) to ``n_fin`` bits with the Toeplitz matrix given by ``seed``.

    ``seed`` has N_in + n_fin - 1 bits; row i of the matrix is
    ``seed[n_fin-1-i : n_fin-1-i+N_in]``. The product is computed as an
    NTT convolution, split into sub-matrices when it would exceed the
    transform size.
    """
    key = _as_bits(key)
    seed = _as_bits(seed)
    n_in = key.size
    if n_fin > n_in:
        raise ValueError(f"cannot extract {n_fin} bits from a {n_in}-bit key")
    if n_fin < 0:
        raise ValueError("n_fin must be non-negative")
    if seed.size != n_in + n_fin - 1 and n_fin > 0:
        raise ValueError(f"seed must have {n_in + n_fin - 1} bits, got {seed.size}")
    if n_fin == 0:
        return BitBlock.zeros(0)
    out = np.zeros(n_fin, dtype=np.uint8)
    for i0 in range(0, n_fin, _CHUNK):
        i1 = min(i0 + _CHUNK, n_fin)
        rows = i1 - i0
        for j0 in range(0, n_in, _CHUNK):
            j1 = min(j0 + _CHUNK, n_in)
            # sub-matrix T[i0:i1, j0:j1] is Toeplitz with its own diagonal vector
            lo = n_fin - i1 + j0
            sub_seed = seed[lo: lo + rows + (j1 - j0) - 1]
            out[i0:i1] ^= _toeplitz_conv(key[j0:j1], sub_seed, rows)
    return BitBlock._wrap(out)


# --- correction confirmation -------------------------------------------------


def confirmation_hash(key: BitBlock, r: int) -> int:
    """96-bit polynomial hash of the key keyed by ``r``; the bit length is hashed too."""
    return poly_hash(len(key).to_bytes(8, "big") + key.to_bytes(), r, CONFIRM_BITS)


def draw_confirmation_key(rng: np.random.Generator) -> int:
    while True:
        r = int.from_bytes(rng.bytes(CONFIRM_BITS // 8), "big")
        if r:
            return r


def confirm(key: BitBlock, r: int | None, link: Link, role: Party) -> bool:
    """Compare keyed hashes of both keys; Alice supplies ``r``, Bob receives it.

    Alice sends (r, hash_A); Bob answers with hash_B. Both return the same
    boolean.
    """
    nb = CONFIRM_BITS // 8
    if role is Party.ALICE:
        if not r:
            raise ValueError("Alice needs a non-zero confirmation key")
        mine = confirmation_hash(key, r)
        link.send(MsgType.CONFIRM_HASH, r.to_bytes(nb, "big") + mine.to_bytes(nb, "big"))
        theirs = link.recv(MsgType.CONFIRM_HASH)
        if len(theirs) != nb:
            raise ProtocolError("malformed CONFIRM_HASH reply")
        return int.from_bytes(theirs, "big") == mine
    payload = link.recv(MsgType.CONFIRM_HASH)
    if len(payload) != 2 * nb:
        raise ProtocolError("malformed CONFIRM_HASH")
    r = int.from_bytes(payload[:nb], "big")
    if r == 0:
        raise ProtocolError("confirmation key must be non-zero")
    mine = confirmation_hash(key, r)
    link.send(MsgType.CONFIRM_HASH, mine.to_bytes(nb, "big"))
    return int.from_bytes(payload[nb:], "big") == mine
