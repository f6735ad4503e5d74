"""Clock synchronization and coincidence matching.

Offsets are Bob-minus-Alice and are expressed as functions of Bob's local
time: a Bob tag at ``tb`` pairs with an Alice tag near ``tb - offset(tb)``.

Synchronization runs in three steps.

1. A cross-correlation of 1 us bin counts over the full search range,
   computed with an FFT on a short Alice segment, finds the offset to a
   few microseconds.
2. The offset is re-measured with direct difference histograms on short
   segments further and further from the first one, with bins shrinking
   as the drift estimate improves, down to 1 ns. A line through these
   measurements gives offset and drift.
3. Bob's stream is cut into blocks of at least 2^10 tags and each block
   gets its own offset from a histogram of nearest-tag differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .core import TagStream

PS_PER_S = 10 ** 12
DEFAULT_SEARCH_RANGE = 10.0
DEFAULT_BIN = 1_000_000
FINAL_BIN = 1_000
DEFAULT_WINDOW = 1_000
DEFAULT_MIN_BLOCK = 1 << 10
DEFAULT_MAX_DRIFT = 1e-5
FINE_BIN = 50
FINE_BOX = 700
MAX_FINE_CELLS = 1 << 26


class NoSyncError(RuntimeError):
    def __init__(self, detail: str = ""):
        super().__init__("no sync found" + (f": {detail}" if detail else ""))


def _threshold(n_lags: float) -> float:
    # 5 sigma, raised one sigma above the expected noise maximum over n_lags
    return max(5.0, math.sqrt(2 * math.log(max(n_lags, 2))) + 1.0)


def _box(x: np.ndarray, w: int) -> np.ndarray:
    """Sums over windows of ``w`` consecutive entries (length len(x) - w + 1)."""
    c = np.concatenate([[0.0], np.cumsum(x, dtype=np.float64)])
    return c[w:] - c[:-w]


@dataclass(frozen=True)
class CoarseSync:
    """Linear clock model: offset(tb) = offset + drift * (tb - t_ref)."""

    offset: float
    drift: float
    t_ref: float
    resolution: float
    significance: float
    stages: tuple = ()

    def offset_at(self, tb) -> np.ndarray:
        return self.offset + self.drift * (np.asarray(tb, dtype=float) - self.t_ref)

    def __int__(self) -> int:
        return int(round(self.offset))


@dataclass
class OffsetModel:
    """Per-block offsets of Bob's stream.

    ``t_start`` / ``t_center`` are Bob-time block boundaries and centres;
    ``offsets`` the measured offset at each centre. Offsets between centres
    are interpolated linearly; ``flagged`` blocks had no clear peak and
    carry interpolated values.
    """

    t_start: np.ndarray
    t_center: np.ndarray
    offsets: np.ndarray
    flagged: np.ndarray
    coarse: CoarseSync
    n_block: np.ndarray = field(default=None)

    @property
    def blocks(self) -> list[tuple[int, float]]:
        return list(zip(self.t_start.tolist(), self.offsets.tolist()))

    def offset_at(self, tb) -> np.ndarray:
        tb = np.asarray(tb, dtype=float)
        if self.t_center.size == 0:
            return self.coarse.offset_at(tb)
        if self.t_center.size == 1:
            return np.full(tb.shape, self.offsets[0])
        return np.interp(tb, self.t_center, self.offsets)

    @classmethod
    def constant(cls, offset: float) -> "OffsetModel":
        c = CoarseSync(float(offset), 0.0, 0.0, 0.0, math.inf)
        return cls(np.zeros(1, np.int64), np.zeros(1), np.array([float(offset)]),
                   np.zeros(1, bool), c, np.zeros(1, np.int64))

    def to_json(self) -> dict:
        c = self.coarse
        return {
            "coarse": {"offset_ps": c.offset, "drift": c.drift, "t_ref_ps": c.t_ref,
                       "resolution_ps": c.resolution, "significance": c.significance},
            "blocks": [{"t_start_ps": int(s), "t_center_ps": float(m), "offset_ps": float(o),
                        "flagged": bool(f)}
                       for s, m, o, f in zip(self.t_start, self.t_center, self.offsets, self.flagged)],
        }


@dataclass(frozen=True)
class CoincidenceSet:
    idx_a: np.ndarray
    idx_b: np.ndarray
    delta: np.ndarray
    window: int

    def __len__(self) -> int:
        return int(self.idx_a.size)

    @classmethod
    def empty(cls, window: int = DEFAULT_WINDOW) -> "CoincidenceSet":
        z = np.zeros(0, np.int64)
        return cls(z, z.copy(), z.copy(), window)


# --- coarse stage ------------------------------------------------------------


def _fft_stage(ta, tb, search_range_ps, bin_ps, seg_len_ps, max_drift, mid, n_tries=1):
    """Offset from binned cross-correlation of the Alice segment centred on ``mid``.

    The threshold covers ``n_tries`` such attempts on different segments.
    """
    s0 = mid - seg_len_ps // 2
    s1 = s0 + seg_len_ps
    a_seg = ta[np.searchsorted(ta, s0): np.searchsorted(ta, s1)]
    if a_seg.size == 0:
        raise NoSyncError("empty correlation segment")
    b0 = s0 - search_range_ps
    b1 = s1 + search_range_ps
    b_seg = tb[np.searchsorted(tb, b0): np.searchsorted(tb, b1)]
    if b_seg.size == 0:
        raise NoSyncError("no Bob tags inside the search range")
    na = -(-seg_len_ps // bin_ps)
    nb = -(-(b1 - b0) // bin_ps)
    a_bins = np.bincount((a_seg - s0) // bin_ps, minlength=na).astype(np.float64)
    a_bins -= a_bins.mean()
    b_bins = np.bincount((b_seg - b0) // bin_ps, minlength=nb).astype(np.float64)
    var_a = float(np.mean(a_bins ** 2))
    n = sfft.next_fast_len(na + nb, real=True)
    cross = np.conj(sfft.rfft(a_bins, n)) * sfft.rfft(b_bins, n)
    corr = sfft.irfft(cross, n)[: nb - na + 1]
    del cross
    # lag L puts Alice bin i against Bob bin i + L: offset = b0 - s0 + L*bin.
    # With zero-mean Alice bins, corr(L) has variance var_a * sum_i b[i+L]^2.
    w = math.ceil(max_drift * seg_len_ps / bin_ps) + 2
    s2 = _box(b_bins ** 2, na)
    del b_bins
    boxed = _box(corr, w)
    del corr
    var = var_a * _box(s2, w)
    z_all = np.divide(boxed, np.sqrt(var), out=np.zeros_like(boxed), where=var > 0)
    peak = int(np.argmax(z_all))
    z = float(z_all[peak])
    # neighbouring boxed lags share w - 1 terms
    thr = _threshold(n_tries * z_all.size / w)
    if not z >= thr:
        raise NoSyncError(f"correlation peak {z:.1f} sigma below threshold {thr:.1f}")
    offset = b0 - s0 + (peak + w / 2) * bin_ps
    t_ref = mid + offset
    return float(offset), float(t_ref), (w / 2 + 1.5) * bin_ps, z


def _diff_histogram(ta, tb_seg, model, half, bin_ps):
    """Histogram of tb - model(tb) - ta over Alice tags within ``half``."""
    pred = tb_seg - np.rint(model(tb_seg)).astype(np.int64)
    lo = np.searchsorted(ta, pred - half, side="left")
    hi = np.searchsorted(ta, pred + half, side="right")
    cnt = hi - lo
    total = int(cnt.sum())
    nbins = 2 * (-(-half // bin_ps))
    if total == 0:
        return np.zeros(nbins), np.zeros(0)
    rep = np.repeat(np.arange(tb_seg.size), cnt)
    start = np.repeat(lo - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
    idx = start + np.arange(total)
    diff = pred[rep] - ta[idx]
    bins = np.clip((diff + nbins // 2 * bin_ps) // bin_ps, 0, nbins - 1)
    return np.bincount(bins, minlength=nbins).astype(np.float64), diff


def _measure(ta, tb, rate_a, center, seg_len, model, half, bin_ps):
    """Offset near Bob time ``center`` relative to ``model``; None if no clear peak."""
    s0, s1 = center - seg_len // 2, center + seg_len // 2
    tb_seg = tb[np.searchsorted(tb, s0): np.searchsorted(tb, s1)]
    if tb_seg.size == 0:
        return None
    hist, diff = _diff_histogram(ta, tb_seg, model, half, bin_ps)
    w = 2
    boxed = _box(hist, w)
    peak = int(np.argmax(boxed))
    bg = tb_seg.size * rate_a * w * bin_ps / PS_PER_S
    excess = boxed[peak] - bg
    if excess < max(5.0, _threshold(boxed.size) * math.sqrt(max(bg, 1.0))):
        return None
    lo_edge = (peak - hist.size // 2) * bin_ps
    sel = diff[(diff >= lo_edge) & (diff < lo_edge + w * bin_ps)]
    resid = float(np.mean(sel)) if sel.size else lo_edge + bin_ps
    t_mid = float(np.mean(tb_seg))
    return t_mid, float(model(np.array([t_mid]))[0]) + resid, excess / math.sqrt(max(bg, 1.0))


def coarse_offset(a: TagStream, b: TagStream, search_range: float = DEFAULT_SEARCH_RANGE,
                  bin: int = DEFAULT_BIN, final_bin: int = FINAL_BIN,
                  max_drift: float = DEFAULT_MAX_DRIFT, segment: float = 0.5) -> CoarseSync:
    """Offset and drift of Bob's clock from binned cross-correlation.

    The first stage correlates ``bin``-wide bin counts over
    ``+-search_range`` seconds with an FFT. Later stages histogram tag
    differences around the current estimate on short segments spread over
    the common span, with bins shrinking towards ``final_bin`` as the
    drift estimate tightens. Raises :class:`NoSyncError` when the first
    stage shows no significant peak.
    """
    ta, tb = a.t, b.t
    if ta.size == 0 or tb.size == 0:
        raise NoSyncError("empty stream")
    rng_ps = int(search_range * PS_PER_S)
    seg_ps = int(min(segment * PS_PER_S, max(int(ta[-1] - ta[0]), bin)))
    seg_ps = max(bin, seg_ps - seg_ps % bin)
    # the middle of Alice's record first; other segments in case the clocks
    # are offset by a sizeable fraction of the record and Bob missed it
    span = int(ta[-1] - ta[0])
    fractions = (0.5, 0.25, 0.75, 0.1, 0.9)
    errors = []
    for f in fractions:
        mid = int(ta[0]) + min(max(int(f * span), seg_ps // 2), max(span - seg_ps // 2, 0))
        try:
            off0, t_ref, unc, z = _fft_stage(ta, tb, rng_ps, bin, seg_ps, max_drift, mid, len(fractions))
            break
        except NoSyncError as exc:
            # keep only the text: the traceback would pin the large arrays
            errors.append(str(exc).removeprefix("no sync found: "))
    else:
        raise NoSyncError(errors[0])

    rate_a = ta.size / max(float(ta[-1] - ta[0]), 1.0) * PS_PER_S
    rate_b = tb.size / max(float(tb[-1] - tb[0]), 1.0) * PS_PER_S
    # segments long enough for ~4096 Bob tags
    seg_len = int(min(max(4096 / rate_b, 1e-3), 1.0) * PS_PER_S)
    pts_t, pts_o, pts_w = [], [], []
    d_unc = max_drift
    stages = [(bin, off0)]
    lo_t, hi_t = max(float(tb[0]), float(ta[0] + off0)), min(float(tb[-1]), float(ta[-1] + off0))

    def fit():
        if not pts_t:
            return off0, 0.0
        t = np.array(pts_t)
        o = np.array(pts_o)
        wts = np.array(pts_w)
        tm = np.average(t, weights=wts)
        om = np.average(o, weights=wts)
        if np.ptp(t) < 2 * seg_len:
            return om, 0.0
        slope = np.sum(wts * (t - tm) * (o - om)) / np.sum(wts * (t - tm) ** 2)
        return om + slope * (t_ref - tm), slope

    # re-measure at the reference point, then at doubling distances on both sides
    distances = [0.0]
    d = 4 * seg_len
    while d < hi_t - lo_t:
        distances += [d, -d]
        d *= 2
    distances += [hi_t - t_ref - seg_len, lo_t - t_ref + seg_len]
    off_unc = unc
    for dist in distances:
        center = t_ref + dist
        if not lo_t <= center <= hi_t:
            continue
        o_ref, drift = fit()
        half = int(off_unc + d_unc * abs(dist)) + 4 * final_bin
        bin_ps = int(max(final_bin, 2 ** math.ceil(math.log2(max(d_unc * seg_len, half / 512, 1)))))
        model = (lambda o_ref, drift: lambda t: o_ref + drift * (t - t_ref))(o_ref, drift)
        m = _measure(ta, tb, rate_a, int(center), seg_len, model, half, bin_ps)
        if m is None:
            continue
        pts_t.append(m[0])
        pts_o.append(m[1])
        pts_w.append(1.0 / bin_ps ** 2)
        stages.append((bin_ps, m[1]))
        span = np.ptp(pts_t)
        if span >= 2 * seg_len:
            d_unc = min(d_unc, 4 * bin_ps / span)
        off_unc = min(off_unc, 2 * bin_ps)
    if not pts_t:
        # a true peak always reappears in the direct histograms
        raise NoSyncError(f"correlation peak {z:.1f} sigma not confirmed by tag differences")
    off, drift = fit()
    return CoarseSync(float(off), float(drift), float(t_ref), float(min(off_unc, unc)), z, tuple(stages))


# --- fine stage --------------------------------------------------------------


def _block_edges(n: int, min_block: int) -> np.ndarray:
    if n <= min_block:
        return np.array([0, n])
    edges = np.arange(0, n, min_block)
    if n - edges[-1] < min_block:
        edges = edges[:-1]
    return np.append(edges, n)


def fine_sync(a: TagStream, b: TagStream, coarse: CoarseSync, min_block: int = DEFAULT_MIN_BLOCK,
              half_range: int | None = None, bin: int = FINE_BIN) -> OffsetModel:
    """Per-block offsets from nearest-tag difference histograms.

    Each block of at least ``min_block`` Bob tags histograms, in one pass,
    the difference between each Bob tag (corrected by ``coarse``) and its
    nearest Alice tag within ``half_range``. The densest ``FINE_BOX``-wide
    window is the block's peak; its mean difference refines the offset.
    Blocks without a peak above the accidental floor are flagged and
    interpolated from their neighbours.
    """
    ta, tb = a.t, b.t
    if tb.size == 0 or ta.size == 0:
        raise NoSyncError("empty stream")
    half = int(half_range or max(2000, 3 * coarse.resolution))
    nbins = 2 * (-(-half // bin))
    if nbins * (tb.size // min_block + 1) > MAX_FINE_CELLS:
        raise NoSyncError(f"coarse offset too uncertain ({half} ps) for the fine stage")
    pred = tb - np.rint(coarse.offset_at(tb)).astype(np.int64)
    i = np.clip(np.searchsorted(ta, pred), 1, max(ta.size - 1, 1))
    left = pred - ta[i - 1]
    right = pred - ta[np.minimum(i, ta.size - 1)]
    resid = np.where(np.abs(left) <= np.abs(right), left, right)
    del left, right, i, pred
    edges = _block_edges(tb.size, min_block)
    n_blocks = edges.size - 1
    block = np.repeat(np.arange(n_blocks), np.diff(edges))
    inside = np.abs(resid) < nbins // 2 * bin
    hb = (resid[inside] + nbins // 2 * bin) // bin
    hist = np.bincount(block[inside] * nbins + hb, minlength=n_blocks * nbins).reshape(n_blocks, nbins)
    w = max(1, FINE_BOX // bin)
    c = np.concatenate([np.zeros((n_blocks, 1)), np.cumsum(hist, axis=1)], axis=1)
    boxed = c[:, w:] - c[:, :-w]
    peak = np.argmax(boxed, axis=1)
    peak_count = boxed[np.arange(n_blocks), peak]

    rate_a = ta.size / max(float(ta[-1] - ta[0]), 1.0) * PS_PER_S
    sizes = np.diff(edges)
    bg = sizes * rate_a * 2 * (w * bin) / PS_PER_S
    ok = (peak_count - bg >= 5 * np.sqrt(np.maximum(bg, 1.0))) & (peak_count >= 4)

    # re-centre on the mean residual within +-FINE_BOX of the current centre;
    # a window symmetric about the true peak gives an unbiased mean
    center = (peak - nbins // 2) * bin + w * bin / 2
    r_in, b_in = resid[inside].astype(np.float64), block[inside]
    for _ in range(4):
        sel = np.abs(r_in - center[b_in]) <= FINE_BOX
        sums = np.bincount(b_in[sel], weights=r_in[sel], minlength=n_blocks)
        cnts = np.bincount(b_in[sel], minlength=n_blocks)
        center = np.where(cnts > 0, sums / np.maximum(cnts, 1), center)
    mean_res = center

    t_start = tb[edges[:-1]].astype(np.int64)
    sums_t = np.add.reduceat(tb.astype(np.float64), edges[:-1])
    t_center = sums_t / sizes
    offsets = coarse.offset_at(t_center) + mean_res
    if not ok.any():
        raise NoSyncError("no fine block shows a coincidence peak")
    if not ok.all():
        offsets = np.where(ok, offsets, np.interp(t_center, t_center[ok], offsets[ok]))
    return OffsetModel(t_start, t_center, offsets, ~ok, coarse, sizes)


def synchronize(a: TagStream, b: TagStream, search_range: float = DEFAULT_SEARCH_RANGE,
                min_block: int = DEFAULT_MIN_BLOCK, max_drift: float = DEFAULT_MAX_DRIFT,
                bin: int = DEFAULT_BIN) -> OffsetModel:
    return fine_sync(a, b, coarse_offset(a, b, search_range, bin=bin, max_drift=max_drift), min_block)


# --- matching ----------------------------------------------------------------


def _candidates(ta, tb_corr, half):
    lo = np.searchsorted(ta, tb_corr - half, side="left")
    hi = np.searchsorted(ta, tb_corr + half, side="right")
    cnt = hi - lo
    total = int(cnt.sum())
    ib = np.repeat(np.arange(tb_corr.size), cnt)
    start = np.repeat(lo - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
    ia = start + np.arange(total)
    return ia, ib


def match_times(ta: np.ndarray, tb_corr: np.ndarray, window: int = DEFAULT_WINDOW):
    """Greedy one-to-one matching of sorted ``ta`` with corrected Bob times.

    Pairs need ``|tb - ta| <= window / 2``. Candidates are accepted in
    order of increasing ``|delta|``, ties going to the earlier Bob tag.
    Returns (idx_a, idx_b, delta) sorted by idx_b.
    """
    half = window // 2
    if ta.size == 0 or tb_corr.size == 0:
        z = np.zeros(0, np.int64)
        return z, z.copy(), z.copy()
    ia, ib = _candidates(ta, tb_corr, half)
    delta = tb_corr[ib] - ta[ia]
    # a candidate is unambiguous when neither tag has another candidate
    cnt_a = np.bincount(ia, minlength=ta.size)
    cnt_b = np.bincount(ib, minlength=tb_corr.size)
    simple = (cnt_a[ia] == 1) & (cnt_b[ib] == 1)
    keep = simple.copy()
    rest = np.nonzero(~simple)[0]
    if rest.size:
        order = rest[np.lexsort((ib[rest], np.abs(delta[rest])))]
        used_a, used_b = set(), set()
        for k in order.tolist():
            x, y = int(ia[k]), int(ib[k])
            if x in used_a or y in used_b:
                continue
            used_a.add(x)
            used_b.add(y)
            keep[k] = True
    ia, ib, delta = ia[keep], ib[keep], delta[keep]
    order = np.argsort(ib, kind="stable")
    return ia[order], ib[order], delta[order]


def match_coincidences(a: TagStream, b: TagStream, m: OffsetModel, window: int = DEFAULT_WINDOW,
                       chunk: int = 1 << 21) -> CoincidenceSet:
    """Coincidences within the window after offset correction.

    ``window`` is the full width in ps: tags pair when the corrected times
    differ by at most ``window / 2``.
    """
    if len(a) == 0 or len(b) == 0:
        return CoincidenceSet.empty(window)
    out_a, out_b, out_d = [], [], []
    half = window // 2
    for s in range(0, len(b), chunk):
        tb = b.t[s: s + chunk]
        corr = tb - np.rint(m.offset_at(tb)).astype(np.int64)
        # Alice tags reachable from this chunk
        lo = np.searchsorted(a.t, corr.min() - half)
        hi = np.searchsorted(a.t, corr.max() + half, side="right")
        ia, ib, d = match_times(a.t[lo:hi], corr, window)
        out_a.append(ia + lo)
        out_b.append(ib + s)
        out_d.append(d)
    ia, ib, d = np.concatenate(out_a), np.concatenate(out_b), np.concatenate(out_d)
    # an Alice tag at a chunk seam may be claimed twice; keep the closer one
    if len(out_a) > 1:
        order = np.lexsort((ib, np.abs(d), ia))
        first = np.ones(order.size, bool)
        first[1:] = ia[order][1:] != ia[order][:-1]
        keep = np.sort(order[first])
        ia, ib, d = ia[keep], ib[keep], d[keep]
    return CoincidenceSet(ia, ib, d, window)
