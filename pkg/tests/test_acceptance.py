"""End-to-end acceptance criteria 1-8.

Each test records a pass/fail line in ``conftest.ACCEPTANCE`` before
asserting, so the terminal summary lists every criterion even when one
fails. Run alone with ``python3 -m pytest tests/test_acceptance.py``.
"""

from __future__ import annotations

import time

import mpmath
import numpy as np
import pytest

from fsqkd.cascade import CascadeConfig, reconcile_local
from fsqkd.channel import HEADER, MsgType
from fsqkd.core import BitBlock, Party
from fsqkd.gf2n import FIELD_SIZES, gf_mul_int
from fsqkd.kms import AVAILABLE, CONSUMED, RESERVED, KeyStore, KmsError, session_key_id
from fsqkd.linkmodel import LinkParams, RateBudget, accidental_rate, beam_spread_loss_db, extrapolate_skr
from fsqkd.privacy import FinalKeyParams, binary_entropy, final_length, tau, toeplitz_naive, toeplitz_pa
from fsqkd.session import SessionConfig, run_loopback
from fsqkd.simulator import (
    NIGHT_SINGLES_A, NIGHT_SINGLES_B, generate_session, jena_night, poisson_stream,
)
from fsqkd.sync import NoSyncError, OffsetModel, match_coincidences, synchronize

from .conftest import ACCEPTANCE, shared_keys
from .test_auth import forgery_threshold, tamper_trials
from .test_gf2n import schoolbook_mul
from .test_privacy import tau_oracle

# printed value of tau(0.02); see the check in criterion 4
TAU_002_LITERAL = 0.858551


def record(k: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)


def _loopback(a, b, cfg=SessionConfig(), tamper=None, psk_bytes=4096):
    ka, kb = shared_keys(psk_bytes)
    sa, sb = KeyStore("alice", "bob"), KeyStore("alice", "bob")
    frames = []
    ra, rb = run_loopback(a, b, cfg, ka, kb, sa, sb, tamper=tamper,
                          taps=[lambda d, raw: frames.append(raw)])
    return ra, rb, sa, sb, frames


@pytest.mark.slow
def test_criterion_1_benchmark_rate():
    t0 = time.perf_counter()
    a, b, _ = generate_session(jena_night(duration=60.0), truth=False)
    t_sim = time.perf_counter() - t0
    ra, rb, sa, sb, _ = _loopback(a, b)
    del a, b
    wall = time.perf_counter() - t0
    skr = ra.metrics.get("skr_bps", 0.0)
    equal = ra.ok and rb.ok and ra.final_key == rb.final_key
    ok = equal and 4000 <= skr <= 7000 and wall < 300
    assert record(1, ok, f"skr={skr / 1e3:.2f} kbps, keys equal={equal}, qber={ra.metrics.get('qber', 0):.4f}, "
                         f"runtime={wall:.0f} s (simulation {t_sim:.0f} s)")


def test_criterion_2_accidentals():
    rng = np.random.default_rng(2)
    dur = 10.0
    a = poisson_stream(NIGHT_SINGLES_A, dur, Party.ALICE, rng)
    b = poisson_stream(NIGHT_SINGLES_B, dur, Party.BOB, rng)
    rate = len(match_coincidences(a, b, OffsetModel.constant(0.0), 1000)) / dur
    want = accidental_rate(RateBudget(NIGHT_SINGLES_A, NIGHT_SINGLES_B, window=1e-9))
    ok = abs(rate / 195.7 - 1) <= 0.1
    assert record(2, ok, f"matched {rate:.1f} cps vs 195.7 (model {want:.1f})")


def test_criterion_3_link_anchors():
    near = beam_spread_loss_db(LinkParams(1700.0, cn2=1e-15))
    far = beam_spread_loss_db(LinkParams(10_000.0, cn2=1e-15))
    skr = extrapolate_skr(5600.0, 2.1)
    ok = near <= 0.3 and 1.3 <= far <= 2.9 and 3300 <= skr <= 3600
    assert record(3, ok, f"loss(1.7 km)={near:.3f} dB, loss(10 km)={far:.3f} dB, skr={skr / 1e3:.3f} kbps")


def test_criterion_4_formula_exactness():
    oracle = float(tau_oracle(mpmath.mpf("0.02")))
    t002 = tau(0.02)
    rng = np.random.default_rng(4)
    grid_ok = True
    for _ in range(1000):
        n_in = int(rng.integers(0, 5_000_000))
        e = float(rng.uniform(0, 0.6))
        n_dis, n_mar = int(rng.integers(0, n_in // 2 + 1)), int(rng.integers(0, 1000))
        t = tau_oracle(e) if 0 < e <= 0.5 else (1 if e == 0 else 0)
        want = max(int(mpmath.floor(n_in * t)) - n_dis - n_mar, 0)
        grid_ok &= final_length(FinalKeyParams(n_in, e, n_dis, n_mar)) == want
    ends = tau(0.0) == 1.0 and tau(0.51) == 0.0 and tau(0.9) == 0.0
    ok = ends and abs(t002 - oracle) <= 1e-6 and grid_ok
    # the printed literal disagrees with every high-precision evaluation
    assert record(4, ok, f"tau(0.02)={t002:.10f}, oracle={oracle:.10f}, printed literal off by "
                         f"{abs(TAU_002_LITERAL - oracle):.1e}; endpoints={ends}, grid={grid_ok}")


@pytest.mark.slow
def test_criterion_5_oracle_equivalences():
    rng = np.random.default_rng(5)
    gf_ok = True
    for n in FIELD_SIZES:
        for _ in range(1000):
            x, y = (int.from_bytes(rng.bytes(n // 8), "big") for _ in range(2))
            gf_ok &= gf_mul_int(x, y, n) == schoolbook_mul(x, y, n)
    tp_ok = True
    for _ in range(1000):
        n_in = int(rng.integers(1, 400))
        n_fin = int(rng.integers(1, n_in + 1))
        key = rng.integers(0, 2, n_in, dtype=np.uint8)
        s = rng.integers(0, 2, n_in + n_fin - 1, dtype=np.uint8)
        tp_ok &= np.array_equal(toeplitz_pa(key, s, n_fin).bits, toeplitz_naive(key, s, n_fin))
    agree = 0
    cases = 1000
    for i in range(cases):
        n = int(rng.integers(1024, 4097))
        e = float(rng.uniform(0, 0.05))
        x = rng.integers(0, 2, n, dtype=np.uint8)
        y = x ^ (rng.random(n) < e).astype(np.uint8)
        out = reconcile_local(BitBlock._wrap(x), BitBlock._wrap(y), e, CascadeConfig(shuffle_seed=i))
        agree += np.array_equal(out.key.bits, x)
    # leakage target stated for e in [0.01, 0.05] on 2^14-bit keys; f is taken
    # against the pair's realized error rate, the nominal rate only seeds it
    n, fs, fs_nominal = 1 << 14, [], []
    for i in range(1000):
        e = float(rng.uniform(0.01, 0.05))
        x = rng.integers(0, 2, n, dtype=np.uint8)
        y = x ^ (rng.random(n) < e).astype(np.uint8)
        out = reconcile_local(BitBlock._wrap(x), BitBlock._wrap(y), e, CascadeConfig(shuffle_seed=i))
        done = np.array_equal(out.key.bits, x)
        fs.append(out.n_disclosed / (n * binary_entropy(np.mean(x != y))) if done else np.inf)
        fs_nominal.append(out.n_disclosed / (n * binary_entropy(e)))
    ok = gf_ok and tp_ok and agree == cases and max(fs) <= 1.35
    assert record(5, ok, f"gf_mul {5 * 1000} cases={gf_ok}, toeplitz 1000 cases={tp_ok}, "
                         f"cascade equal {agree}/{cases}, leakage f max={max(fs):.3f} mean={np.mean(fs):.3f} "
                         f"on 2^14 (against nominal e: max {max(fs_nominal):.3f})")


@pytest.mark.slow
def test_criterion_6_sync_recovery():
    worst, flagged, lines = 0.0, False, []
    for offset, drift in [(5.0, 1e-5), (-5.0, -1e-5), (4.9, -1e-5), (-4.9, 1e-5)]:
        p = jena_night(duration=3.0 + max(0.0, -offset), clock_offset=offset, clock_drift=drift,
                       seed=int(abs(offset) * 10) + (drift > 0))
        a, b, gt = generate_session(p, truth=True)
        m = synchronize(a, b)
        err = float(np.abs(m.offsets - gt.offset_at_bob(m.t_center)).max())
        worst, flagged = max(worst, err), flagged or bool(m.flagged.any())
        lines.append(f"{offset:+.1f} s/{drift:+.0e}: {err:.0f} ps")
    rng = np.random.default_rng(6)
    try:
        synchronize(poisson_stream(NIGHT_SINGLES_A, 3.0, Party.ALICE, rng),
                    poisson_stream(NIGHT_SINGLES_B, 3.0, Party.BOB, rng))
        null = "synchronized on noise"
    except NoSyncError as exc:
        null = str(exc).split(":")[0]
    ok = worst < 500 and not flagged and null == "no sync found"
    assert record(6, ok, f"worst block error {worst:.0f} ps ({'; '.join(lines)}); uncorrelated -> {null!r}")


def _flip_first(sender: str, mtype: MsgType, rng):
    done = []

    def tamper(name, raw):
        if done or name != sender or raw[HEADER.size - 1] != mtype:
            return raw
        done.append(True)
        bit = int(rng.integers(HEADER.size * 8 if len(raw) > HEADER.size else 0, 8 * len(raw)))
        out = bytearray(raw)
        out[bit // 8] ^= 1 << (bit % 8)
        return bytes(out)
    return tamper, done


@pytest.mark.slow
def test_criterion_7_security(night_tags):
    trials = 10_000
    undetected, max_blocks = tamper_trials(trials, n=32, seed=7)
    bound = forgery_threshold(trials, max_blocks)
    a, b, _ = night_tags
    rng = np.random.default_rng(7)
    leaks, runs = 0, 0
    cases = [("B", MsgType.SYNC_DATA), ("A", MsgType.SIFT_BASES), ("B", MsgType.ERR_SAMPLE),
             ("A", MsgType.CASCADE_PARITY), ("B", MsgType.CONFIRM_HASH), ("A", MsgType.PA_SEED),
             ("B", MsgType.DISCLOSE_COUNT), ("A", MsgType.AUTH_TAG)]
    for sender, mtype in cases:
        tamper, done = _flip_first(sender, mtype, rng)
        ra, rb, sa, sb, frames = _loopback(a, b, tamper=tamper)
        sniffed_abort = any(raw[HEADER.size - 1] == MsgType.ABORT for raw in frames)
        runs += 1
        leaks += not (done and not ra.ok and not rb.ok and ra.final_key is None and rb.final_key is None
                      and sa.total_bits == sb.total_bits == 0 and sniffed_abort)
    for stage in ("sift", "amplify"):
        ra, rb, sa, sb, frames = _loopback(a, b, cfg=SessionConfig(abort_after=stage))
        runs += 1
        leaks += not (ra.final_key is None and rb.final_key is None and sa.total_bits == sb.total_bits == 0
                      and frames[-1][HEADER.size - 1] == MsgType.ABORT)
    ok = undetected <= bound and leaks == 0
    assert record(7, ok, f"undetected tampers {undetected}/{trials} (bound {bound}, L={max_blocks}, n=32); "
                         f"aborted sessions releasing key {leaks}/{runs}")


def test_criterion_8_kms(night_tags):
    rng = np.random.default_rng(8)
    s = KeyStore("alice", "bob")
    conserved, ksid = True, None
    for step in range(5000):
        op = rng.integers(5)
        try:
            if op == 0:
                s.push(rng.integers(0, 2, int(rng.integers(0, 600)), dtype=np.uint8), session_key_id(b"acc", step))
            elif op == 1 and ksid is None:
                ksid = s.open_connect("alice", "bob")
            elif op == 2 and ksid is not None:
                s.close(ksid)
                ksid = None
            elif op == 3 and ksid is not None:
                s.get_key(ksid, 8 * int(rng.integers(1, 50)))
            elif op == 4 and ksid is not None:
                s.reserve(ksid, 8 * int(rng.integers(1, 50)))
        except KmsError:
            pass
        t = s.totals()
        conserved &= t[AVAILABLE] + t[RESERVED] + t[CONSUMED] == t["pushed"]
    single = KeyStore("alice", "bob")
    k = single.open_connect("alice", "bob")
    try:
        single.open_connect("bob", "alice")
        exclusive = False
    except KmsError:
        exclusive = True
    single.close(k)
    a, b, _ = night_tags
    ra, rb, sa, sb, _ = _loopback(a, b)
    ka, kb = sa.open_connect("alice", "bob"), sb.open_connect("bob", "alice")
    same, draws = True, 0
    while sa.available_bits >= 256:
        r = sa.get_key(ka, 256)
        same &= sb.get_key(kb, 256, r.key_id).key == r.key
        draws += 1
    ok = conserved and exclusive and same and draws > 0
    assert record(8, ok, f"conservation over 5000 ops={conserved}, single session={exclusive}, "
                         f"identical bytes over {draws} key_ids={same}")
