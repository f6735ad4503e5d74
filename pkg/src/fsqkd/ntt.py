"""Number-theoretic transform over Z/998244353 and exact integer convolution.

998244353 = 119 * 2^23 + 1 with primitive root 3, so power-of-two
transforms up to length 2^23 exist. Inputs are kept below the modulus
(< 2^30) so every product fits in uint64 before reduction.
"""

from __future__ import annotations

import numpy as np

MOD = 998244353
ROOT = 3
MAX_LOG = 23


def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.int64)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _powers(w: int, count: int) -> np.ndarray:
    out = np.empty(count, dtype=np.uint64)
    out[0] = 1
    filled = 1
    while filled < count:
        step = min(filled, count - filled)
        out[filled: filled + step] = out[:step] * np.uint64(pow(w, filled, MOD)) % np.uint64(MOD)
        filled += step
    return out


def ntt(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 transform of a length-2^k array with entries < MOD."""
    n = a.size
    if n & (n - 1):
        raise ValueError("transform length must be a power of two")
    if n > 1 << MAX_LOG:
        raise ValueError(f"transform length {n} exceeds 2^{MAX_LOG}")
    m = np.uint64(MOD)
    a = np.asarray(a, dtype=np.uint64)[_bitrev(n)]
    length = 2
    while length <= n:
        w = pow(ROOT, (MOD - 1) // length, MOD)
        if inverse:
            w = pow(w, MOD - 2, MOD)
        half = length // 2
        tw = _powers(w, half)
        blocks = a.reshape(-1, length)
        u = blocks[:, :half]
        v = blocks[:, half:] * tw % m
        a = np.concatenate([(u + v) % m, (u + m - v) % m], axis=1).reshape(-1)
        length <<= 1
    if inverse:
        a = a * np.uint64(pow(n, MOD - 2, MOD)) % m
    return a


def convolve(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact linear convolution of non-negative integer sequences.

    Exact as long as every output coefficient is below MOD, e.g. for 0/1
    inputs when min(len(x), len(y)) < MOD.
    """
    if x.size == 0 or y.size == 0:
        return np.zeros(0, dtype=np.uint64)
    out_len = x.size + y.size - 1
    size = 1 << max(0, (out_len - 1).bit_length())
    fx = np.zeros(size, dtype=np.uint64)
    fy = np.zeros(size, dtype=np.uint64)
    fx[: x.size] = x
    fy[: y.size] = y
    prod = ntt(fx) * ntt(fy) % np.uint64(MOD)
    return ntt(prod, inverse=True)[:out_len]
