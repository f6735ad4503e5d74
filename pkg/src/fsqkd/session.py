"""Two-party post-processing session.

Stages, in order: authentication init, time-tag exchange and sync,
coincidence matching, sifting, error estimation, cascade, confirmation,
privacy amplification and delayed-authentication verification. Alice is
the reference party and does the synchronization; Bob only ever sends
detection times, bases and disclosed parities.

Message flow (A = Alice, B = Bob)::

    B->A SYNC_DATA      Bob's detection times (delta + zlib, chunked)
    A->B SYNC_DATA      matched Bob indices and per-bin rate statistics
    A->B, B->A SIFT_BASES   bases of the matched detections
    A->B ERR_SAMPLE     sample seed and Alice's sample bits; B->A Bob's bits
    cascade             CASCADE_ACK / CASCADE_PARITY dialogue
    A->B CONFIRM_HASH   r and Alice's hash; B->A Bob's hash
    DISCLOSE_COUNT      both send N_dis
    A->B PA_SEED        session nonce, N_fin and the Toeplitz seed
    AUTH_TAG            one tag per direction, both ways, then a release token
"""

from __future__ import annotations

import enum
import logging
import math
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import cascade, privacy, sifting, sync
from .auth import AuthKeys, InsufficientKeyError, Link, Transcript, finalize_mac, verify_exchange
from .channel import Channel, ChannelError, LoopbackChannel, MsgType, PeerAbort, ProtocolError
from .core import BitBlock, Party, TagStream
from .gf2n import FIELD_SIZES, GfElement
from .kms import KeyStore, session_key_id

log = logging.getLogger(__name__)

STATS_SCHEMA = "fsqkd-stats/1"
STATS_COLUMNS = ("bin_start_s", "skr_bps", "qber", "singles_a", "singles_b", "coinc")
SYNC_CHUNK = 16 << 20
PS_PER_S = 10 ** 12


class Stage(enum.IntEnum):
    INIT = 0
    SYNCED = 1
    SIFTED = 2
    ESTIMATED = 3
    RECONCILED = 4
    CONFIRMED = 5
    AMPLIFIED = 6
    AUTHENTICATED = 7
    ABORTED = 8


STAGE_NAMES = {s: s.name.lower() for s in Stage}
# verb forms accepted by --abort-after
STAGE_ALIASES = {"init": "init", "sync": "synced", "sift": "sifted", "estimate": "estimated",
                 "reconcile": "reconciled", "confirm": "confirmed", "amplify": "amplified",
                 "authenticate": "authenticated"}


class SessionAbort(Exception):
    """A stage failed; the session key is discarded."""


@dataclass(frozen=True)
class SessionConfig:
    window: int = sync.DEFAULT_WINDOW
    search_range: float = sync.DEFAULT_SEARCH_RANGE
    max_drift: float = sync.DEFAULT_MAX_DRIFT
    min_block: int = sync.DEFAULT_MIN_BLOCK
    sample_fraction: float = sifting.DEFAULT_FRACTION
    qber_max: float = 0.11
    cascade_passes: int = cascade.CascadeConfig.passes
    n_mar: int = privacy.DEFAULT_N_MAR
    auth_bits: int = 128
    timeout: float = 30.0
    stats_bin: float = 300.0
    seed: int = 0
    abort_after: str | None = None

    def __post_init__(self):
        if self.auth_bits not in FIELD_SIZES:
            raise ValueError(f"auth_bits must be one of {FIELD_SIZES}, got {self.auth_bits}")
        if self.window <= 0:
            raise ValueError("coincidence window must be positive")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if not 0 <= self.qber_max < 0.5:
            raise ValueError("qber_max must lie in [0, 0.5)")
        if self.n_mar < 0 or self.stats_bin <= 0 or self.timeout <= 0:
            raise ValueError("n_mar must be >= 0, stats_bin and timeout > 0")
        if self.abort_after in STAGE_ALIASES:
            object.__setattr__(self, "abort_after", STAGE_ALIASES[self.abort_after])
        if self.abort_after is not None and self.abort_after not in STAGE_NAMES.values():
            raise ValueError(f"unknown stage {self.abort_after!r}")


@dataclass
class SessionState:
    role: Party
    stage: Stage = Stage.INIT
    n_dis: int = 0
    history: list = field(default_factory=list)

    def advance(self, stage: Stage):
        if stage is Stage.ABORTED:
            self.stage = stage
        elif self.stage is Stage.ABORTED or stage != self.stage + 1:
            raise RuntimeError(f"illegal transition {self.stage.name} -> {stage.name}")
        else:
            self.stage = stage
        self.history.append(stage)

    def disclose(self, n: int):
        if n < 0:
            raise ValueError("disclosure count cannot decrease")
        self.n_dis += n


@dataclass
class SessionResult:
    role: Party
    state: SessionState
    final_key: BitBlock | None
    key_id: bytes | None
    metrics: dict
    stats: list
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.state.stage is Stage.AUTHENTICATED


# --- wire helpers ------------------------------------------------------------


def encode_sorted(values: np.ndarray) -> bytes:
    """Delta-encode a non-decreasing int64 array; byte planes then zlib."""
    values = np.asarray(values, dtype=np.int64)
    deltas = np.diff(values, prepend=np.int64(0)).astype("<u8")
    planes = deltas.view(np.uint8).reshape(-1, 8).T.tobytes()
    return struct.pack("<Q", values.size) + zlib.compress(planes, 1)


def decode_sorted(data: bytes, max_count: int = 1 << 31) -> np.ndarray:
    if len(data) < 8:
        raise ProtocolError("short encoded array")
    (n,) = struct.unpack("<Q", data[:8])
    if n > max_count:
        raise ProtocolError("encoded array too long")
    try:
        planes = zlib.decompress(data[8:])
    except zlib.error as exc:
        raise ProtocolError(f"corrupt encoded array: {exc}") from None
    if len(planes) != 8 * n:
        raise ProtocolError("encoded array length mismatch")
    deltas = np.frombuffer(planes, np.uint8).reshape(8, n).T.copy().view("<u8").reshape(-1)
    return np.cumsum(deltas.astype(np.int64))


def _send_chunked(link: Link, mtype: MsgType, data: bytes):
    n = max(1, math.ceil(len(data) / SYNC_CHUNK))
    link.send(mtype, struct.pack("<I", n) + data[:SYNC_CHUNK])
    for i in range(1, n):
        link.send(mtype, data[i * SYNC_CHUNK: (i + 1) * SYNC_CHUNK])


def _recv_chunked(link: Link, mtype: MsgType) -> bytes:
    first = link.recv(mtype)
    if len(first) < 4:
        raise ProtocolError("short chunked message")
    (n,) = struct.unpack("<I", first[:4])
    if not 1 <= n <= 1024:
        raise ProtocolError("bad chunk count")
    parts = [first[4:]] + [link.recv(mtype) for _ in range(n - 1)]
    return b"".join(parts)


def _pack_bits(bits: np.ndarray) -> bytes:
    return struct.pack("<Q", bits.size) + np.packbits(bits.astype(np.uint8)).tobytes()


def _unpack_bits(payload: bytes, expected: int | None = None) -> np.ndarray:
    if len(payload) < 8:
        raise ProtocolError("short bit vector")
    (n,) = struct.unpack("<Q", payload[:8])
    if (expected is not None and n != expected) or len(payload) != 8 + (n + 7) // 8:
        raise ProtocolError("bit vector length mismatch")
    return np.unpackbits(np.frombuffer(payload[8:], np.uint8))[:n]


# --- statistics --------------------------------------------------------------


def _bin_counts(t_ps: np.ndarray, bin_ps: int, n_bins: int) -> np.ndarray:
    idx = np.clip(t_ps // bin_ps, 0, n_bins - 1)
    return np.bincount(idx, minlength=n_bins)[:n_bins]


def stats_report(metrics: dict) -> list[dict]:
    """Per-bin rates from a finished session's metrics.

    The final key is spread over bins in proportion to each bin's share of
    reconciled bits; ``qber`` is the sampled error fraction in the bin.
    """
    b = metrics.get("bins")
    if not b:
        return []
    bin_s = b["bin_s"]
    dur = np.asarray(b["duration_s"], dtype=float)
    key_bits = np.asarray(b["key_bits"], dtype=float)
    n_fin = metrics.get("n_fin", 0) if metrics.get("authenticated") else 0
    share = key_bits / key_bits.sum() if key_bits.sum() else np.zeros_like(key_bits)
    rows = []
    for i in range(dur.size):
        d = dur[i] if dur[i] > 0 else bin_s
        sample = b["sample"][i]
        rows.append({
            "bin_start_s": i * bin_s,
            "skr_bps": float(n_fin * share[i] / d),
            "qber": float(b["sample_err"][i] / sample) if sample else 0.0,
            "singles_a": float(b["singles_a"][i] / d),
            "singles_b": float(b["singles_b"][i] / d),
            "coinc": float(b["coinc"][i] / d),
        })
    return rows


def format_stats_csv(rows: list[dict]) -> str:
    lines = [f"# schema: {STATS_SCHEMA}", ",".join(STATS_COLUMNS)]
    for r in rows:
        lines.append(",".join(
            f"{r[c]:.6g}" if c != "bin_start_s" else f"{r[c]:g}" for c in STATS_COLUMNS))
    return "\n".join(lines) + "\n"


# --- the session -------------------------------------------------------------


class _Session:
    def __init__(self, role: Party, tags: TagStream, cfg: SessionConfig, channel: Channel,
                 keys: AuthKeys, kms: KeyStore | None):
        if tags.party is not role:
            raise ValueError(f"{role.value} needs its own tag stream, got {tags.party.value}'s")
        self.role = role
        self.tags = tags
        self.cfg = cfg
        self.channel = channel
        self.keys = keys
        self.kms = kms
        self.state = SessionState(role)
        self.metrics: dict = {"role": role.value}
        self.rng = np.random.default_rng([cfg.seed, 0 if role is Party.ALICE else 1])
        self.link: Link | None = None
        self.bins: dict = {}

    @property
    def alice(self) -> bool:
        return self.role is Party.ALICE

    def _step(self, stage: Stage):
        self.state.advance(stage)
        self.metrics[f"t_{stage.name.lower()}"] = time.perf_counter() - self._t0
        log.info("%s reached %s", self.role.value, stage.name)
        if self.cfg.abort_after == STAGE_NAMES[stage]:
            raise SessionAbort(f"aborted after {STAGE_NAMES[stage]} on request")

    # stage 0
    def init_auth(self):
        n = self.cfg.auth_bits
        k = self.keys.take(n, "hash")
        if k == 0:
            raise SessionAbort("pre-shared hash key is zero")
        self.link = Link(self.channel, Transcript(GfElement(k, n)), Transcript(GfElement(k, n)),
                         self.cfg.timeout)

    # stage 1
    def exchange_and_sync(self):
        link, cfg = self.link, self.cfg
        bin_ps = int(cfg.stats_bin * PS_PER_S)
        if not self.alice:
            _send_chunked(link, MsgType.SYNC_DATA, encode_sorted(self.tags.t))
            reply = _recv_chunked(link, MsgType.SYNC_DATA)
            if len(reply) < 8:
                raise ProtocolError("short sync reply")
            (n_idx_bytes,) = struct.unpack("<Q", reply[:8])
            idx_b = decode_sorted(reply[8: 8 + n_idx_bytes])
            if idx_b.size and (idx_b[-1] >= len(self.tags) or np.any(np.diff(idx_b) <= 0)):
                raise ProtocolError("matched indices out of range")
            self._set_bins(np.frombuffer(reply[8 + n_idx_bytes:], "<i8").reshape(5, -1)
                           if len(reply) > 8 + n_idx_bytes else None)
            self.matched = idx_b
            self.metrics["n_coinc"] = int(idx_b.size)
            return
        times_b = decode_sorted(_recv_chunked(link, MsgType.SYNC_DATA))
        b = TagStream(times_b, np.zeros(times_b.size, np.uint8), Party.BOB, check=False)
        a = self.tags
        if len(a) == 0 or len(b) == 0:
            raise SessionAbort("no sync found: empty tag stream")
        try:
            model = sync.synchronize(a, b, cfg.search_range, cfg.min_block, cfg.max_drift)
        except sync.NoSyncError as exc:
            raise SessionAbort(str(exc)) from None
        coinc = sync.match_coincidences(a, b, model, cfg.window)
        if len(coinc) == 0:
            raise SessionAbort("no sync found: no coincidences")
        self.model = model
        self.matched = coinc.idx_a
        self.metrics.update(n_coinc=len(coinc), offset_ps=model.coarse.offset,
                            drift=model.coarse.drift, flagged_blocks=int(model.flagged.sum()))
        # per-bin statistics on Alice's time base
        t_end = int(max(a.t[-1], 0)) + 1
        n_bins = max(1, math.ceil(t_end / bin_ps))
        corr_b = b.t - np.rint(model.offset_at(b.t)).astype(np.int64)
        counts = np.stack([
            _bin_counts(a.t, bin_ps, n_bins),
            _bin_counts(corr_b, bin_ps, n_bins),
            _bin_counts(corr_b[coinc.idx_b], bin_ps, n_bins),
            np.minimum(t_end - np.arange(n_bins) * bin_ps, bin_ps),
            np.zeros(n_bins, np.int64),
        ]).astype("<i8")
        self._set_bins(counts)
        idx_payload = encode_sorted(coinc.idx_b)
        _send_chunked(link, MsgType.SYNC_DATA,
                      struct.pack("<Q", len(idx_payload)) + idx_payload + counts.tobytes())
        self.metrics["singles_a"] = len(a)
        self.metrics["singles_b"] = len(b)

    def _set_bins(self, counts):
        if counts is None:
            return
        self.bins = {"bin_s": self.cfg.stats_bin, "singles_a": counts[0].tolist(),
                     "singles_b": counts[1].tolist(), "coinc": counts[2].tolist(),
                     "duration_s": (counts[3] / PS_PER_S).tolist()}
        self.metrics.setdefault("singles_a", int(counts[0].sum()))
        self.metrics.setdefault("singles_b", int(counts[1].sum()))
        self.coinc_bin = np.repeat(np.arange(counts.shape[1]), counts[2])

    # stage 2
    def sift(self):
        link = self.link
        ch = self.tags.ch[self.matched]
        mine = (ch >> 1).astype(np.uint8)
        if self.alice:
            link.send(MsgType.SIFT_BASES, _pack_bits(mine))
            theirs = _unpack_bits(link.recv(MsgType.SIFT_BASES), mine.size)
        else:
            theirs = _unpack_bits(link.recv(MsgType.SIFT_BASES), mine.size)
            link.send(MsgType.SIFT_BASES, _pack_bits(mine))
        mask, bits = sifting.sift_bits(ch, theirs, flip_hv=not self.alice)
        self.key = bits
        self.key_bin = self.coinc_bin[mask] if self.bins and self.coinc_bin.size == mask.size else None
        self.metrics["n_sifted"] = int(bits.size)
        if bits.size == 0:
            raise SessionAbort("insufficient key: nothing sifted")

    # stage 3
    def estimate(self):
        link, n = self.link, self.key.size
        if self.alice:
            seed = int(self.rng.integers(0, 2 ** 63))
            pos = sifting.sample_positions(n, self.cfg.sample_fraction, seed)
            mine = self.key[pos]
            link.send(MsgType.ERR_SAMPLE, struct.pack("<Q", seed) + _pack_bits(mine))
            theirs = _unpack_bits(link.recv(MsgType.ERR_SAMPLE), pos.size)
        else:
            payload = link.recv(MsgType.ERR_SAMPLE)
            if len(payload) < 8:
                raise ProtocolError("short ERR_SAMPLE")
            (seed,) = struct.unpack("<Q", payload[:8])
            pos = sifting.sample_positions(n, self.cfg.sample_fraction, seed)
            theirs = _unpack_bits(payload[8:], pos.size)
            mine = self.key[pos]
            link.send(MsgType.ERR_SAMPLE, _pack_bits(mine))
        err = mine != theirs
        e = float(np.count_nonzero(err)) / pos.size
        self.metrics.update(qber=e, n_sample=int(pos.size))
        if self.key_bin is not None:
            nb = len(self.bins["coinc"])
            self.bins["sample"] = np.bincount(self.key_bin[pos], minlength=nb).tolist()
            self.bins["sample_err"] = np.bincount(self.key_bin[pos][err], minlength=nb).tolist()
            keep = np.ones(n, bool)
            keep[pos] = False
            self.bins["key_bits"] = np.bincount(self.key_bin[keep], minlength=nb).tolist()
        self.key = sifting.remove_positions(self.key, pos)
        self.e = e
        if e > self.cfg.qber_max:
            raise SessionAbort(f"QBER {e:.4f} above limit {self.cfg.qber_max}")
        if self.key.size == 0:
            raise SessionAbort("insufficient key after error estimation")

    # stage 4
    def reconcile(self):
        cfg = cascade.CascadeConfig(passes=self.cfg.cascade_passes, shuffle_seed=self.cfg.seed)
        out = cascade.reconcile(self.role, BitBlock._wrap(self.key), self.e, cfg, self.link)
        self.key_block = out.key
        self.state.disclose(out.n_disclosed)
        self.metrics.update(cascade_disclosed=out.n_disclosed, n_corrected=out.n_corrected,
                            cascade_msgs=out.transcript_msgs)

    # stage 5
    def confirm(self):
        r = privacy.draw_confirmation_key(self.rng) if self.alice else None
        same = privacy.confirm(self.key_block, r, self.link, self.role)
        self.state.disclose(privacy.CONFIRM_BITS)
        if not same:
            raise SessionAbort("confirmation failed")
        mine = struct.pack("<Q", self.state.n_dis)
        self.link.send(MsgType.DISCLOSE_COUNT, mine)
        if self.link.recv(MsgType.DISCLOSE_COUNT) != mine:
            raise SessionAbort("disclosure counts differ between parties")

    # stage 6
    def amplify(self):
        n_in = len(self.key_block)
        n_fin = privacy.final_length(privacy.FinalKeyParams(n_in, self.e, self.state.n_dis, self.cfg.n_mar))
        self.metrics.update(n_in=n_in, n_dis=self.state.n_dis, n_mar=self.cfg.n_mar, n_fin=n_fin)
        if self.alice:
            nonce = self.rng.bytes(16)
            seed = self.rng.integers(0, 2, n_in + n_fin - 1 if n_fin else 0, dtype=np.uint8)
            self.link.send(MsgType.PA_SEED, nonce + struct.pack("<Q", n_fin) + _pack_bits(seed))
        else:
            payload = self.link.recv(MsgType.PA_SEED)
            if len(payload) < 24:
                raise ProtocolError("short PA_SEED")
            nonce = payload[:16]
            (peer_fin,) = struct.unpack("<Q", payload[16:24])
            if peer_fin != n_fin:
                raise SessionAbort(f"final length mismatch ({peer_fin} vs {n_fin})")
            seed = _unpack_bits(payload[24:], n_in + n_fin - 1 if n_fin else 0)
        self.nonce = nonce
        self.final = privacy.toeplitz_pa(self.key_block, seed, n_fin)

    # stage 7
    def authenticate(self):
        link = self.link
        k_ab = finalize_mac(link.tr_out if self.alice else link.tr_in, self.keys, "otp A->B")
        k_ba = finalize_mac(link.tr_in if self.alice else link.tr_out, self.keys, "otp B->A")
        tag_out, tag_in = (k_ab, k_ba) if self.alice else (k_ba, k_ab)
        ok = verify_exchange(tag_out, tag_in, link, self.cfg.auth_bits)
        # Release round: a fresh OTP token proves the peer's tags verified,
        # so a tampered tag frame cannot leave one side holding a key.
        rel_ab = self.keys.take(self.cfg.auth_bits, "release A->B")
        rel_ba = self.keys.take(self.cfg.auth_bits, "release B->A")
        own, peer = (rel_ab, rel_ba) if self.alice else (rel_ba, rel_ab)
        nb = self.cfg.auth_bits // 8
        try:
            link.send(MsgType.AUTH_TAG, own.to_bytes(nb, "big") if ok else b"")
            verdict = link.recv(MsgType.AUTH_TAG) if ok else b""
        except (ChannelError, ProtocolError, PeerAbort):
            verdict = b""
        if not ok:
            raise SessionAbort("authentication failed")
        if verdict != peer.to_bytes(nb, "big"):
            raise SessionAbort("authentication failed: peer did not confirm release")

    def run(self) -> SessionResult:
        self._t0 = time.perf_counter()
        reason = ""
        final, key_id = None, None
        try:
            self.init_auth()
            steps = [(self.exchange_and_sync, Stage.SYNCED), (self.sift, Stage.SIFTED),
                     (self.estimate, Stage.ESTIMATED), (self.reconcile, Stage.RECONCILED),
                     (self.confirm, Stage.CONFIRMED), (self.amplify, Stage.AMPLIFIED),
                     (self.authenticate, Stage.AUTHENTICATED)]
            for fn, stage in steps:
                fn()
                self._step(stage)
            final = self.final
            if self.kms is not None and len(final):
                key_id = session_key_id(self.nonce, 0)
                self.kms.push(final, key_id)
        except (SessionAbort, PeerAbort, ProtocolError, ChannelError, InsufficientKeyError,
                cascade.CascadeError, sifting.InsufficientKeyError, ValueError) as exc:
            reason = str(exc) if not isinstance(exc, PeerAbort) else f"peer aborted: {exc}"
            if isinstance(exc, ChannelError) and "timed out" in str(exc).lower():
                reason = f"timeout in stage after {self.state.stage.name.lower()}: {exc}"
            if not isinstance(exc, PeerAbort) and self.link is not None:
                self.link.abort(reason)
            self.state.advance(Stage.ABORTED)
            final = None
            log.warning("%s aborted: %s", self.role.value, reason)
        self.metrics["authenticated"] = self.state.stage is Stage.AUTHENTICATED
        self.metrics["elapsed_s"] = time.perf_counter() - self._t0
        if self.bins and "key_bits" in self.bins:
            self.metrics["bins"] = self.bins
        if len(self.tags):
            self.metrics["duration_s"] = float(self.tags.t[-1] - self.tags.t[0]) / PS_PER_S
        if not self.metrics["authenticated"]:
            self.metrics["n_fin_released"] = 0
        else:
            self.metrics["n_fin_released"] = len(final)
        if self.metrics.get("duration_s"):
            self.metrics["skr_bps"] = self.metrics["n_fin_released"] / self.metrics["duration_s"]
        return SessionResult(self.role, self.state, final, key_id, self.metrics,
                             stats_report(self.metrics), reason)


def run_session(role: Party, tags: TagStream, cfg: SessionConfig, channel: Channel,
                keys: AuthKeys, kms: KeyStore | None = None) -> SessionResult:
    """Run one endpoint of a session to completion or abort.

    The final key is only returned (and pushed to ``kms``) once both
    authentication tags verified; otherwise ``final_key`` is None.
    """
    return _Session(Party(role), tags, cfg, channel, keys, kms).run()


def run_loopback(tags_a: TagStream, tags_b: TagStream, cfg: SessionConfig, keys_a: AuthKeys,
                 keys_b: AuthKeys, kms_a: KeyStore | None = None, kms_b: KeyStore | None = None,
                 tamper=None, taps=()) -> tuple[SessionResult, SessionResult]:
    """Both endpoints in threads over an in-memory channel."""
    ch_a, ch_b = LoopbackChannel.pair(tamper)
    for tap in taps:
        ch_a.taps.append(tap)
    results: dict = {}

    def go(role, tags, ch, keys, kms):
        try:
            results[role] = run_session(role, tags, cfg, ch, keys, kms)
        finally:
            ch.close()

    th = threading.Thread(target=go, args=(Party.BOB, tags_b, ch_b, keys_b, kms_b), daemon=True)
    th.start()
    go(Party.ALICE, tags_a, ch_a, keys_a, kms_a)
    th.join()
    return results[Party.ALICE], results[Party.BOB]
