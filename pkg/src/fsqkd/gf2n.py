"""Binary-field arithmetic GF(2^n) for n in {32, 64, 96, 128, 256}.

Elements are Python ints holding the polynomial coefficients (bit i is the
coefficient of x^i). Each field uses the lexicographically least
irreducible polynomial of its degree:

    n=32   x^32  + x^7 + x^3 + x^2 + 1                0x8d
    n=64   x^64  + x^4 + x^3 + x + 1                  0x1b
    n=96   x^96  + x^6 + x^5 + x^3 + x^2 + x + 1      0x6f
    n=128  x^128 + x^7 + x^2 + x + 1                  0x87
    n=256  x^256 + x^10 + x^5 + x^2 + 1               0x425

(the hex value is the polynomial with the x^n term removed).

Besides scalar multiplication the module provides :func:`horner`, a
vectorised evaluation of sum(m_i * k^(N-i)) over millions of blocks, used
for transcript authentication and key confirmation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FIELD_SIZES = (32, 64, 96, 128, 256)
REDUCTION_TAIL = {32: 0x8D, 64: 0x1B, 96: 0x6F, 128: 0x87, 256: 0x425}


def modulus(n: int) -> int:
    """Full reduction polynomial for GF(2^n), including the x^n term."""
    try:
        return (1 << n) | REDUCTION_TAIL[n]
    except KeyError:
        raise ValueError(f"unsupported field size {n}; expected one of {FIELD_SIZES}") from None


def clmul(a: int, b: int) -> int:
    """Carry-less product of two non-negative ints."""
    if a.bit_length() < b.bit_length():
        a, b = b, a
    r = 0
    while b:
        low = b & -b
        r ^= a << (low.bit_length() - 1)
        b ^= low
    return r


def reduce(a: int, n: int) -> int:
    """Reduce a polynomial of degree < 2n modulo the field polynomial."""
    tail = REDUCTION_TAIL[n]
    mask = (1 << n) - 1
    # x^n == tail, so fold the high part down; tail has degree < 11, two folds suffice
    while a >> n:
        a = (a & mask) ^ clmul(a >> n, tail)
    return a


def gf_mul_int(a: int, b: int, n: int) -> int:
    return reduce(clmul(a, b), n)


def gf_pow_int(a: int, e: int, n: int) -> int:
    r = 1
    while e:
        if e & 1:
            r = gf_mul_int(r, a, n)
        a = gf_mul_int(a, a, n)
        e >>= 1
    return r


@dataclass(frozen=True)
class GfElement:
    value: int
    n: int

    def __post_init__(self):
        if self.n not in REDUCTION_TAIL:
            raise ValueError(f"unsupported field size {self.n}")
        if not 0 <= self.value < (1 << self.n):
            raise ValueError(f"value does not fit in {self.n} bits")

    def _same(self, other: "GfElement"):
        if not isinstance(other, GfElement):
            return NotImplemented
        if other.n != self.n:
            raise ValueError(f"field size mismatch: GF(2^{self.n}) vs GF(2^{other.n})")
        return True

    def __add__(self, other):
        if self._same(other) is NotImplemented:
            return NotImplemented
        return GfElement(self.value ^ other.value, self.n)

    __sub__ = __add__
    __xor__ = __add__

    def __mul__(self, other):
        return gf_mul(self, other)

    def __pow__(self, e: int):
        if e < 0:
            return self.inverse() ** (-e)
        return GfElement(gf_pow_int(self.value, e, self.n), self.n)

    def inverse(self) -> "GfElement":
        if self.value == 0:
            raise ZeroDivisionError("zero has no inverse")
        return self ** ((1 << self.n) - 2)

    def __bool__(self):
        return self.value != 0


def gf_mul(a: GfElement, b: GfElement) -> GfElement:
    if not isinstance(a, GfElement) or not isinstance(b, GfElement):
        raise TypeError("gf_mul expects GfElement operands")
    if a.n != b.n:
        raise ValueError(f"field size mismatch: GF(2^{a.n}) vs GF(2^{b.n})")
    return GfElement(gf_mul_int(a.value, b.value, a.n), a.n)


# --- vectorised evaluation ---------------------------------------------------


def _limbs(n: int) -> int:
    return (n + 63) // 64


def int_to_limbs(v: int, n: int) -> np.ndarray:
    L = _limbs(n)
    return np.array([(v >> (64 * j)) & 0xFFFFFFFFFFFFFFFF for j in range(L)], dtype=np.uint64)


def limbs_to_int(a: np.ndarray) -> int:
    return sum(int(x) << (64 * j) for j, x in enumerate(a.tolist()))


def bytes_to_blocks(data: bytes, n: int) -> np.ndarray:
    """Split ``data`` into n-bit big-endian blocks, zero-padding the last.

    Returns an (N, limbs) uint64 array, least significant limb first.
    """
    nb = n // 8
    L = _limbs(n)
    N = -(-len(data) // nb)
    buf = np.zeros((N, 8 * L), dtype=np.uint8)
    if N:
        raw = np.frombuffer(data, dtype=np.uint8)
        padded = np.zeros(N * nb, dtype=np.uint8)
        padded[: raw.size] = raw
        buf[:, 8 * L - nb:] = padded.reshape(N, nb)
    # buf rows are big-endian integers; limb j (LS first) is bytes [8(L-1-j), 8(L-j))
    limbs = buf.view(">u8").astype(np.uint64)
    return np.ascontiguousarray(limbs[:, ::-1])


class _ConstMul:
    """Multiply arrays of field elements by a fixed constant via byte tables."""

    def __init__(self, c: int, n: int):
        self.n = n
        nb = n // 8
        L = _limbs(n)
        tail = REDUCTION_TAIL[n]
        top = 1 << (n - 1)
        mask = (1 << n) - 1
        base = np.empty((n, L), dtype=np.uint64)
        v = c
        for i in range(n):
            base[i] = int_to_limbs(v, n)
            v = ((v << 1) & mask) ^ tail if v & top else v << 1
        tables = np.zeros((nb, 256, L), dtype=np.uint64)
        for j in range(nb):
            t = tables[j]
            for bit in range(8):
                w = 1 << bit
                t[w: 2 * w] = t[:w] ^ base[8 * j + bit]
        self.tables = tables
        self.nb = nb

    def __call__(self, x: np.ndarray) -> np.ndarray:
        # little-endian host: the uint8 view of LS-first limbs is LS-first bytes
        xb = np.ascontiguousarray(x).view(np.uint8)
        out = self.tables[0][xb[:, 0]]
        for j in range(1, self.nb):
            out ^= self.tables[j][xb[:, j]]
        return out


def horner(blocks: np.ndarray, k: int, n: int) -> int:
    """Return sum_{i=1..N} m_i * k^(N-i) for an (N, limbs) block array.

    Pairwise tree reduction: at level s adjacent partial sums combine as
    left * k^(2^s) + right. A leading zero block does not change the value,
    so odd levels are padded at the front.
    """
    N = len(blocks)
    if N == 0:
        return 0
    if N <= 16:
        acc = 0
        for row in blocks:
            acc = gf_mul_int(acc, k, n) ^ limbs_to_int(row)
        return acc
    v = blocks
    kp = k
    while len(v) > 1:
        if len(v) % 2:
            v = np.concatenate([np.zeros((1, v.shape[1]), np.uint64), v])
        v = _ConstMul(kp, n)(v[0::2]) ^ v[1::2]
        kp = gf_mul_int(kp, kp, n)
    return limbs_to_int(v[0])
