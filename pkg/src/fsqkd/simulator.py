"""Statistical time-tag generator for an entangled-pair free-space link.

Pairs are emitted as a Poisson process. Each photon survives to its
detector independently, so the detected pairs, Alice-only and Bob-only
photons are three independent Poisson processes (thinning), which lets
a 60 s session be drawn without materializing the lost photons.

Polarization statistics follow |HV> + |VH>: same-basis outcomes are
anti-correlated in HV and correlated in DA, each with a symmetric flip
probability (1 - V) / 2 for visibility V. Mismatched bases give
independent fair bits. Dark counts and background are flat in time and
uniform over the four detectors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import Party, TagStream, read_stream, write_stream

PS = 10 ** 12
DARK = -1
BACKGROUND = -2
DEFAULT_JITTER = 350e-12 / math.sqrt(2)

# singles, coincidences and accidentals of the benchmark night run
NIGHT_SINGLES_A = 1.03e6
NIGHT_SINGLES_B = 1.90e5
NIGHT_COINC = 14.3e3


@dataclass(frozen=True)
class SourceParams:
    """Source, channel, detector and clock parameters (SI units, rates in 1/s)."""

    pair_rate: float = 1.0e6
    v_hv: float = 0.995
    v_da: float = 0.974
    eff_a: float = 0.1
    eff_b: float = 0.02
    dark_per_det_a: float = 200.0
    dark_per_det_b: float = 200.0
    bg_b: float = 0.0
    jitter_sigma: float = DEFAULT_JITTER
    clock_offset: float = 0.0
    clock_drift: float = 0.0
    duration: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("v_hv", "v_da", "eff_a", "eff_b"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("pair_rate", "dark_per_det_a", "dark_per_det_b", "bg_b", "jitter_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.duration > 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if not abs(self.clock_drift) < 1e-3:
            raise ValueError(f"clock_drift must be below 1e-3 in magnitude, got {self.clock_drift}")

    @property
    def expected_singles_a(self) -> float:
        return self.pair_rate * self.eff_a + 4 * self.dark_per_det_a

    @property
    def expected_singles_b(self) -> float:
        return self.pair_rate * self.eff_b + 4 * self.dark_per_det_b + self.bg_b

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    """Clock model and per-tag origin labels of a simulated session.

    ``pair_a`` / ``pair_b`` give the emitted-pair index of every tag, or
    ``DARK`` / ``BACKGROUND``; they are ``None`` when not recorded.
    """

    clock_offset_ps: float
    clock_drift: float
    pair_a: np.ndarray | None = None
    pair_b: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def true_offset_fn(self, t_ps):
        """Bob-minus-Alice offset for a detection at reference time ``t_ps``."""
        return self.clock_offset_ps + self.clock_drift * np.asarray(t_ps, dtype=float)

    def offset_at_bob(self, tb_ps):
        """The same offset expressed as a function of Bob's local time."""
        tb = np.asarray(tb_ps, dtype=float)
        return self.clock_offset_ps + self.clock_drift * (tb - self.clock_offset_ps) / (1 + self.clock_drift)

    def to_json(self) -> dict:
        out = {"clock_offset_ps": self.clock_offset_ps, "clock_drift": self.clock_drift,
               "params": self.params}
        if self.pair_a is not None:
            out["pairs_detected_a"] = int(np.count_nonzero(self.pair_a >= 0))
            out["pairs_detected_b"] = int(np.count_nonzero(self.pair_b >= 0))
            out["true_pairs"] = int(np.intersect1d(self.pair_a[self.pair_a >= 0],
                                                   self.pair_b[self.pair_b >= 0]).size)
        return out


def calibrate(singles_a: float, singles_b: float, coinc: float, window: float = 1e-9,
              jitter_sigma: float = DEFAULT_JITTER, noise_a: float = 0.0,
              noise_b: float = 0.0) -> tuple[float, float, float]:
    """Pair rate and efficiencies that reproduce measured rates.

    ``coinc`` is the measured coincidence rate in a window of full width
    ``window``; accidentals are subtracted and the jitter loss of true pairs
    outside the window is undone. Returns (pair_rate, eff_a, eff_b).
    """
    sig_a = singles_a - noise_a
    sig_b = singles_b - noise_b
    capture = math.erf(window / 2 / (2 * jitter_sigma)) if jitter_sigma > 0 else 1.0
    true_pairs = (coinc - singles_a * singles_b * window) / capture
    if min(sig_a, sig_b, true_pairs) <= 0:
        raise ValueError("rates leave no room for correlated pairs")
    return sig_a * sig_b / true_pairs, true_pairs / sig_b, true_pairs / sig_a


def jena_night(duration: float = 60.0, seed: int = 2022, **overrides) -> SourceParams:
    """Benchmark night-run parameters.

    Visibilities sit below the low-pump values of the source; together with
    the ~200 cps of accidentals they give a sifted QBER near 2 %.
    """
    dark_a, dark_b, bg_b = 200.0, 150.0, 200.0
    pair_rate, eff_a, eff_b = calibrate(NIGHT_SINGLES_A, NIGHT_SINGLES_B, NIGHT_COINC,
                                        noise_a=4 * dark_a, noise_b=4 * dark_b + bg_b)
    base = SourceParams(pair_rate=pair_rate, v_hv=0.98, v_da=0.965, eff_a=eff_a, eff_b=eff_b,
                        dark_per_det_a=dark_a, dark_per_det_b=dark_b, bg_b=bg_b,
                        clock_offset=1.234567891, clock_drift=2.5e-9,
                        duration=duration, seed=seed)
    return replace(base, **overrides)


PRESETS = {"jena-night": jena_night}


def _to_ps(t_s: np.ndarray) -> np.ndarray:
    return np.rint(t_s * PS).astype(np.int64)


def _outcomes(rng: np.random.Generator, n: int, v_hv: float, v_da: float):
    """Detector channels for pairs seen by both parties."""
    basis_a = rng.integers(0, 2, n, dtype=np.uint8)
    basis_b = rng.integers(0, 2, n, dtype=np.uint8)
    bit_a = rng.integers(0, 2, n, dtype=np.uint8)
    flip_p = np.where(basis_a == 0, (1 - v_hv) / 2, (1 - v_da) / 2)
    flip = (rng.random(n) < flip_p).astype(np.uint8)
    # HV anti-correlated, DA correlated, each flipped with prob (1 - V)/2
    same = bit_a ^ (basis_a == 0).astype(np.uint8) ^ flip
    bit_b = np.where(basis_a == basis_b, same, rng.integers(0, 2, n, dtype=np.uint8))
    return (basis_a << 1) | bit_a, (basis_b << 1) | bit_b


def _sorted_stream(t: np.ndarray, ch: np.ndarray, party: Party, labels: np.ndarray | None):
    keep = t >= 0
    if not keep.all():
        t, ch = t[keep], ch[keep]
        labels = labels[keep] if labels is not None else None
    key = (t << 2) | ch.astype(np.int64)
    del t
    if labels is not None:
        order = np.argsort(key, kind="stable")
        key = key[order]
        labels = labels[order]
    else:
        key.sort(kind="stable")
    ch = (key & 3).astype(np.uint8)
    np.right_shift(key, 2, out=key)
    return TagStream(key, ch, party, check=False), labels


def generate_session(p: SourceParams, truth: bool = True, chunk: float = 1.0):
    """Draw Alice's and Bob's tag streams.

    Returns ``(stream_a, stream_b, ground_truth)``. Time is generated in
    chunks of ``chunk`` seconds to bound temporary memory; per-tag labels
    are only kept when ``truth`` is set. Bob's timestamps are mapped
    through ``t -> t (1 + drift) + offset``; tags falling before either
    epoch are dropped.
    """
    rng = np.random.default_rng(p.seed)
    r_both = p.pair_rate * p.eff_a * p.eff_b
    r_a = p.pair_rate * p.eff_a * (1 - p.eff_b)
    r_b = p.pair_rate * (1 - p.eff_a) * p.eff_b
    sigma = p.jitter_sigma
    parts_a, parts_b, lab_a, lab_b = [], [], [], []
    next_id = 0
    n_chunks = max(1, math.ceil(p.duration / chunk))
    for c in range(n_chunks):
        t0 = c * chunk
        span = min(chunk, p.duration - t0)
        n_both, n_a, n_b = rng.poisson(np.array([r_both, r_a, r_b]) * span)
        n_dark_a = rng.poisson(4 * p.dark_per_det_a * span)
        n_dark_b = rng.poisson(4 * p.dark_per_det_b * span)
        n_bg = rng.poisson(p.bg_b * span)

        emit = t0 + span * rng.random(n_both + n_a + n_b)
        ch_both_a, ch_both_b = _outcomes(rng, n_both, p.v_hv, p.v_da)
        ch_a = np.concatenate([ch_both_a, rng.integers(0, 4, n_a + n_dark_a, dtype=np.uint8)])
        ch_b = np.concatenate([ch_both_b, rng.integers(0, 4, n_b + n_dark_b + n_bg, dtype=np.uint8)])
        ta = np.concatenate([emit[: n_both + n_a], t0 + span * rng.random(n_dark_a)])
        tb = np.concatenate([emit[:n_both], emit[n_both + n_a:],
                             t0 + span * rng.random(n_dark_b + n_bg)])
        ta = _to_ps(ta + sigma * rng.standard_normal(ta.size))
        tb = _to_ps(tb * (1 + p.clock_drift) + p.clock_offset + sigma * rng.standard_normal(tb.size))
        parts_a.append((ta, ch_a))
        parts_b.append((tb, ch_b))
        if truth:
            ids = np.arange(next_id, next_id + n_both + n_a + n_b, dtype=np.int64)
            lab_a.append(np.concatenate([ids[: n_both + n_a], np.full(n_dark_a, DARK)]))
            lab_b.append(np.concatenate([ids[:n_both], ids[n_both + n_a:], np.full(n_dark_b, DARK),
                                         np.full(n_bg, BACKGROUND)]))
        next_id += n_both + n_a + n_b

    def assemble(parts, labels, party):
        t = np.concatenate([x[0] for x in parts])
        ch = np.concatenate([x[1] for x in parts])
        parts.clear()
        lab = np.concatenate(labels) if truth else None
        return _sorted_stream(t, ch, party, lab)

    a, pair_a = assemble(parts_a, lab_a, Party.ALICE)
    b, pair_b = assemble(parts_b, lab_b, Party.BOB)
    gt = GroundTruth(p.clock_offset * PS, p.clock_drift, pair_a, pair_b, p.to_dict())
    return a, b, gt


def poisson_stream(rate: float, duration: float, party: Party, rng: np.random.Generator) -> TagStream:
    """Uncorrelated stream: flat Poisson arrivals on random channels."""
    n = rng.poisson(rate * duration)
    t = np.sort(rng.integers(0, int(duration * PS), n, dtype=np.int64))
    ch = rng.integers(0, 4, n, dtype=np.uint8)
    return TagStream.from_unsorted(t, ch, party)


__all__ = [
    "SourceParams", "GroundTruth", "generate_session", "calibrate", "jena_night", "PRESETS",
    "poisson_stream", "write_stream", "read_stream", "DARK", "BACKGROUND", "DEFAULT_JITTER", "PS",
]
