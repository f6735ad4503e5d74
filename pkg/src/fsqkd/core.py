"""Shared domain types: detector channels, tag streams, bit blocks.

Tag streams are stored column-wise (``t`` int64 picoseconds, ``ch`` uint8
channel codes) because realistic sessions hold tens of millions of
detections. :class:`TimeTag` is only the per-record view.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

TTAG_MAGIC = b"TTAG1\x00\x00\x00"


class Party(str, enum.Enum):
    ALICE = "Alice"
    BOB = "Bob"

    @property
    def peer(self) -> "Party":
        return Party.BOB if self is Party.ALICE else Party.ALICE


class Basis(enum.IntEnum):
    HV = 0
    DA = 1


class DetectorChannel(enum.IntEnum):
    """Detector channel code; also the on-disk channel byte."""

    H = 0
    V = 1
    D = 2
    A = 3


def channel_map(ch: DetectorChannel | int) -> tuple[Basis, int]:
    """Return ``(basis, bit)`` for a detector channel.

    H -> (HV, 0), V -> (HV, 1), D -> (DA, 0), A -> (DA, 1).
    """
    ch = DetectorChannel(ch)
    return Basis(int(ch) >> 1), int(ch) & 1


def channel_from(basis: Basis | int, bit: int) -> DetectorChannel:
    return DetectorChannel((int(basis) << 1) | (bit & 1))


def channels_to_basis_bit(ch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`channel_map` over a channel-code array."""
    ch = np.asarray(ch, dtype=np.uint8)
    return ch >> 1, ch & 1


class TimeTag(NamedTuple):
    t: int
    ch: DetectorChannel


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TagStream:
    """Time-ordered detections of one party.

    ``t`` holds local-clock picoseconds since the stream epoch, ``ch`` the
    detector channel codes. Sorted by ``(t, ch)``; arrays are read-only.
    """

    t: np.ndarray
    ch: np.ndarray
    party: Party
    epoch: str = ""
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=np.int64)
        ch = np.ascontiguousarray(self.ch, dtype=np.uint8)
        if t.shape != ch.shape or t.ndim != 1:
            raise ValueError("t and ch must be 1-d arrays of equal length")
        object.__setattr__(self, "party", Party(self.party))
        if self.check and len(t):
            if t[0] < 0:
                raise ValueError("timestamps must be non-negative")
            if np.any(ch > 3):
                raise ValueError("channel codes must be in 0..3")
            key = np.diff(t)
            if np.any(key < 0):
                raise ValueError("tag stream is not sorted by time")
            ties = key == 0
            if np.any(ties) and np.any(ch[1:][ties] < ch[:-1][ties]):
                raise ValueError("tied timestamps must be ordered by channel")
        object.__setattr__(self, "t", _frozen(t.view()))
        object.__setattr__(self, "ch", _frozen(ch.view()))

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[TimeTag]:
        for t, c in zip(self.t.tolist(), self.ch.tolist()):
            yield TimeTag(t, DetectorChannel(c))

    def __getitem__(self, i: int) -> TimeTag:
        return TimeTag(int(self.t[i]), DetectorChannel(int(self.ch[i])))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.party == other.party
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.ch, other.ch)
        )

    __hash__ = None

    @classmethod
    def from_tags(cls, tags: Sequence[TimeTag | tuple[int, int]], party, epoch="") -> "TagStream":
        if len(tags) == 0:
            return cls.empty(party, epoch)
        t, ch = zip(*tags)
        return cls(np.array(t, dtype=np.int64), np.array(ch, dtype=np.uint8), party, epoch)

    @classmethod
    def from_unsorted(cls, t, ch, party, epoch="") -> "TagStream":
        t = np.asarray(t, dtype=np.int64)
        ch = np.asarray(ch, dtype=np.uint8)
        order = np.lexsort((ch, t))
        return cls(t[order], ch[order], party, epoch)

    @classmethod
    def empty(cls, party, epoch="") -> "TagStream":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.uint8), party, epoch)

    @property
    def duration_ps(self) -> int:
        return int(self.t[-1] - self.t[0]) if len(self.t) > 1 else 0

    def window(self, t0: int, t1: int) -> "TagStream":
        """Tags with ``t0 <= t < t1``."""
        lo, hi = np.searchsorted(self.t, [t0, t1])
        return TagStream(self.t[lo:hi], self.ch[lo:hi], self.party, self.epoch, check=False)


def merge_sorted(streams: Sequence[TagStream]) -> TagStream:
    """Merge sorted tag streams of one party into a single sorted stream."""
    if not streams:
        raise ValueError("merge_sorted needs at least one stream")
    parties = {s.party for s in streams}
    if len(parties) != 1:
        raise ValueError(f"cannot merge streams of different parties: {sorted(p.value for p in parties)}")
    if len(streams) == 1:
        return streams[0]
    t = np.concatenate([s.t for s in streams])
    ch = np.concatenate([s.ch for s in streams])
    # stable sort on the combined key keeps (t, ch) order; t < 2**61 assumed
    key = (t << 2) | ch.astype(np.int64)
    key.sort(kind="stable")
    return TagStream(key >> 2, (key & 3).astype(np.uint8), streams[0].party,
                     streams[0].epoch, check=False)


class BitBlock:
    """Immutable bit sequence with length-checked operations.

    Bits are held unpacked (one uint8 per bit) for cheap indexing;
    :meth:`to_bytes` / :meth:`from_bytes` give the packed MSB-first form.
    """

    __slots__ = ("_bits",)

    def __init__(self, bits=()):
        a = np.array(bits, dtype=np.uint8).reshape(-1)
        if a.size and a.max() > 1:
            raise ValueError("BitBlock values must be 0 or 1")
        a.setflags(write=False)
        self._bits = a

    @classmethod
    def _wrap(cls, a: np.ndarray) -> "BitBlock":
        b = cls.__new__(cls)
        a = np.array(a, dtype=np.uint8)
        a.setflags(write=False)
        b._bits = a
        return b

    @classmethod
    def zeros(cls, n: int) -> "BitBlock":
        return cls._wrap(np.zeros(n, np.uint8))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "BitBlock":
        return cls._wrap(rng.integers(0, 2, n, dtype=np.uint8))

    @classmethod
    def from_bytes(cls, data: bytes, length: int | None = None) -> "BitBlock":
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
        if length is None:
            length = bits.size
        if length > bits.size:
            raise ValueError(f"need {length} bits, got {bits.size}")
        return cls._wrap(bits[:length])

    def to_bytes(self) -> bytes:
        return np.packbits(self._bits).tobytes()

    @property
    def bits(self) -> np.ndarray:
        """Read-only uint8 view of the bits."""
        return self._bits

    def __len__(self) -> int:
        return self._bits.size

    def __iter__(self):
        return iter(self._bits.tolist())

    def __getitem__(self, i):
        if isinstance(i, slice):
            return BitBlock._wrap(self._bits[i])
        return int(self._bits[i])

    def _check(self, other: "BitBlock"):
        if len(self) != len(other):
            raise ValueError(f"length mismatch: {len(self)} != {len(other)}")

    def __xor__(self, other: "BitBlock") -> "BitBlock":
        self._check(other)
        return BitBlock._wrap(self._bits ^ other._bits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitBlock):
            return NotImplemented
        return len(self) == len(other) and bool(np.array_equal(self._bits, other._bits))

    __hash__ = None

    def __add__(self, other: "BitBlock") -> "BitBlock":
        return BitBlock._wrap(np.concatenate([self._bits, other._bits]))

    def hamming(self, other: "BitBlock") -> int:
        self._check(other)
        return int(np.count_nonzero(self._bits != other._bits))

    def __repr__(self) -> str:
        head = "".join(map(str, self._bits[:32].tolist()))
        return f"BitBlock(len={len(self)}, {head}{'...' if len(self) > 32 else ''})"


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; accepts an int, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValueError("an explicit seed is required")
    return np.random.default_rng(seed)


# --- TTAG1 file format -------------------------------------------------------

_TTAG_DTYPE = np.dtype([("t", "<i8"), ("ch", "u1")])


class TagFileError(ValueError):
    pass


def write_stream(s: TagStream, path) -> None:
    """Write ``s`` as a TTAG1 file (magic, LE u64 count, 9-byte records)."""
    rec = np.empty(len(s), dtype=_TTAG_DTYPE)
    rec["t"] = s.t
    rec["ch"] = s.ch
    with open(path, "wb") as f:
        f.write(TTAG_MAGIC)
        f.write(struct.pack("<Q", len(s)))
        f.write(rec.tobytes())


def read_stream(path, party=Party.ALICE, epoch: str = "") -> TagStream:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != TTAG_MAGIC:
        raise TagFileError(f"{path}: not a TTAG1 file")
    (count,) = struct.unpack("<Q", data[8:16])
    body = data[16:]
    if len(body) != count * _TTAG_DTYPE.itemsize:
        raise TagFileError(f"{path}: expected {count} records, found {len(body)} bytes")
    rec = np.frombuffer(body, dtype=_TTAG_DTYPE)
    return TagStream(rec["t"].copy(), rec["ch"].copy(), party, epoch)


def read_text_stream(text: str | io.TextIOBase, party=Party.ALICE) -> TagStream:
    """Parse the debugging text form: one ``timestamp,channel`` per line.

    The channel may be given as a code (0-3) or a letter (H, V, D, A).
    """
    if not isinstance(text, str):
        text = text.read()
    t, ch = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            ts, c = (x.strip() for x in line.split(","))
            t.append(int(ts))
            ch.append(int(DetectorChannel[c]) if c.isalpha() else int(DetectorChannel(int(c))))
        except (ValueError, KeyError) as exc:
            raise TagFileError(f"line {lineno}: cannot parse {line!r}") from exc
    return TagStream.from_unsorted(t, ch, party)


def format_text_stream(s: TagStream) -> str:
    return "".join(f"{t},{DetectorChannel(c).name}\n" for t, c in zip(s.t.tolist(), s.ch.tolist()))
