"""Basis sifting and sampled error estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Basis, BitBlock, TagStream
from .sync import CoincidenceSet

DEFAULT_FRACTION = 0.05


class InsufficientKeyError(RuntimeError):
    def __init__(self, detail: str = ""):
        super().__init__("insufficient key" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class SiftResult:
    """Raw keys of both parties over same-basis coincidences.

    Bob's HV bits are already flipped, so noiseless keys are equal.
    """

    key_a: BitBlock
    key_b: BitBlock
    n_coinc_total: int
    basis: np.ndarray

    def __post_init__(self):
        if len(self.key_a) != len(self.key_b):
            raise ValueError("sifted keys must have equal length")

    @property
    def n_sifted(self) -> int:
        return len(self.key_a)

    @property
    def error_rate(self) -> float:
        return self.key_a.hamming(self.key_b) / self.n_sifted if self.n_sifted else 0.0


@dataclass(frozen=True)
class QberEstimate:
    e: float
    n_disclosed: int
    remaining: SiftResult
    positions: np.ndarray


def sift_bits(ch_own: np.ndarray, basis_peer: np.ndarray, flip_hv: bool):
    """One party's view: keep bits measured in the peer's basis.

    Returns (mask over the coincidences, kept bits). ``flip_hv`` is set on
    Bob's side to undo the HV anti-correlation.
    """
    ch_own = np.asarray(ch_own, dtype=np.uint8)
    basis_own, bit = ch_own >> 1, ch_own & 1
    mask = basis_own == np.asarray(basis_peer, dtype=np.uint8)
    bits = bit[mask]
    if flip_hv:
        bits = bits ^ (basis_own[mask] == Basis.HV).astype(np.uint8)
    return mask, bits


def sift(c: CoincidenceSet, a: TagStream, b: TagStream) -> SiftResult:
    """Drop mixed-basis coincidences and return both raw keys."""
    ch_a = a.ch[c.idx_a]
    ch_b = b.ch[c.idx_b]
    mask, bits_a = sift_bits(ch_a, ch_b >> 1, flip_hv=False)
    _, bits_b = sift_bits(ch_b, ch_a >> 1, flip_hv=True)
    return SiftResult(BitBlock._wrap(bits_a), BitBlock._wrap(bits_b), len(c),
                      (ch_a[mask] >> 1).astype(np.uint8))


def sample_positions(n: int, fraction: float, seed: int) -> np.ndarray:
    """Positions disclosed for error estimation, identical for a shared seed."""
    if not 0 < fraction <= 1:
        raise ValueError(f"disclosure fraction must lie in (0, 1], got {fraction}")
    if n == 0:
        raise InsufficientKeyError("empty sifted key")
    k = int(round(fraction * n))
    if k == 0:
        raise InsufficientKeyError(f"{fraction:g} of {n} bits rounds to an empty sample")
    rng = np.random.default_rng([seed, n])
    return np.sort(rng.choice(n, size=k, replace=False))


def remove_positions(bits: np.ndarray, positions: np.ndarray) -> np.ndarray:
    keep = np.ones(bits.size, bool)
    keep[positions] = False
    return bits[keep]


def estimate_qber(s: SiftResult, fraction: float = DEFAULT_FRACTION, seed: int = 0) -> QberEstimate:
    """Disclose a random sample of both keys and drop it from the key.

    ``seed`` stands for the value agreed over the classical channel; both
    parties derive the same positions from it.
    """
    pos = sample_positions(s.n_sifted, fraction, seed)
    a, b = s.key_a.bits, s.key_b.bits
    e = float(np.count_nonzero(a[pos] != b[pos])) / pos.size
    rest = SiftResult(BitBlock._wrap(remove_positions(a, pos)), BitBlock._wrap(remove_positions(b, pos)),
                      s.n_coinc_total, remove_positions(s.basis, pos))
    return QberEstimate(e, int(pos.size), rest, pos)
