import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fsqkd.auth import (
    AuthKeys, InsufficientKeyError, Transcript, finalize_mac, message_blocks, poly_hash,
    transcript_update,
)
from fsqkd.channel import Frame, MsgType, encode_frame
from fsqkd.gf2n import FIELD_SIZES, GfElement

from .test_gf2n import schoolbook_mul


def reference_transcript(msgs: list[bytes], k: int, n: int) -> int:
    """t <- (t xor m) * k per n-bit block; each message zero-padded, then its byte length."""
    nb = n // 8
    t = 0
    for m in msgs:
        padded = m + b"\0" * (-len(m) % nb) + len(m).to_bytes(nb, "big")
        for i in range(0, len(padded), nb):
            t = schoolbook_mul(t ^ int.from_bytes(padded[i:i + nb], "big"), k, n)
    return t


@pytest.mark.parametrize("n", FIELD_SIZES)
@settings(max_examples=25, deadline=None)
@given(msgs=st.lists(st.binary(max_size=200), max_size=5), seed=st.integers(0, 2**32))
def test_transcript_matches_reference(n, msgs, seed):
    k = int.from_bytes(np.random.default_rng(seed).bytes(n // 8), "big")
    tr = Transcript(GfElement(k, n))
    for m in msgs:
        tr.update(m)
    assert tr.t.value == reference_transcript(msgs, k, n)


def test_long_message_uses_tree_path(rng):
    msg = rng.bytes(50_000)
    k = 0x1234567890ABCDEF1234567890ABCDEF
    assert poly_hash(msg, k, 128) == reference_transcript([msg], k, 128)


def test_functional_update_leaves_input():
    tr = Transcript(GfElement(5, 32))
    tr2 = transcript_update(tr, b"abc")
    assert tr.t.value == 0 and tr2.t.value != 0


def test_message_boundaries_matter():
    k = GfElement(0xDEADBEEF, 32)
    one = Transcript(k).update(b"abcd" + b"efgh")
    two = Transcript(k).update(b"abcd").update(b"efgh")
    assert one.t != two.t
    assert len(message_blocks(b"abcde", 32)) == 3


def test_field_mismatch():
    with pytest.raises(ValueError):
        Transcript(GfElement(1, 32), GfElement(0, 64))


class TestAuthKeys:
    def test_take_in_order(self):
        mat = bytes(range(32))
        k = AuthKeys(mat)
        assert k.take(32, "hash") == int.from_bytes(mat[:4], "big")
        assert k.take(16, "otp") == int.from_bytes(mat[4:6], "big")
        assert k.offset == 6 and k.remaining_bytes == 26
        assert [e.purpose for e in k.ledger] == ["hash", "otp"]

    def test_exhaustion(self):
        k = AuthKeys(b"\x01" * 4)
        k.take(32, "hash")
        with pytest.raises(InsufficientKeyError, match="insufficient pre-shared key"):
            k.take(8, "otp")
        k.replenish(b"\x02")
        assert k.take(8, "otp") == 2

    def test_whole_bytes(self):
        with pytest.raises(ValueError):
            AuthKeys(b"\0" * 4).take(5, "x")

    def test_ledger_persists(self, tmp_path):
        (tmp_path / "psk").write_bytes(bytes(64))
        k = AuthKeys.from_file(tmp_path / "psk")
        k.take(128, "hash")
        k2 = AuthKeys.from_file(tmp_path / "psk")
        assert k2.offset == 16
        k2.take(32, "otp")
        assert AuthKeys.from_file(tmp_path / "psk").offset == 20

    def test_finalize_is_one_time_pad(self):
        k = AuthKeys(b"\xff" * 4)
        tr = Transcript(GfElement(3, 32)).update(b"x")
        assert finalize_mac(tr, k) == tr.t.value ^ 0xFFFFFFFF


def tamper_trials(trials: int, n: int = 32, seed: int = 0) -> tuple[int, int]:
    """Flip one random bit of one random classical frame per trial.

    Returns (undetected tampers, largest transcript length in blocks).
    """
    rng = np.random.default_rng(seed)
    types = [t for t in MsgType if t not in (MsgType.AUTH_TAG, MsgType.ABORT)]
    undetected, max_blocks = 0, 0
    for _ in range(trials):
        frames = [encode_frame(Frame(types[rng.integers(len(types))], rng.bytes(int(rng.integers(0, 64)))))
                  for _ in range(int(rng.integers(1, 6)))]
        k = GfElement(int(rng.integers(1, 1 << n)), n)
        otp = int(rng.integers(0, 1 << n))
        sender = Transcript(k)
        for f in frames:
            sender.update(f)
        i = int(rng.integers(len(frames)))
        bit = int(rng.integers(8 * len(frames[i])))
        bad = bytearray(frames[i])
        bad[bit // 8] ^= 1 << (bit % 8)
        receiver = Transcript(k)
        for j, f in enumerate(frames):
            receiver.update(bytes(bad) if j == i else f)
        undetected += (sender.t.value ^ otp) == (receiver.t.value ^ otp)
        max_blocks = max(max_blocks, sender.n_blocks)
    return undetected, max_blocks


def forgery_threshold(trials: int, max_blocks: int, n: int = 32, alpha: float = 1e-3) -> int:
    """Largest count consistent (at level alpha) with the L/2^n collision bound."""
    return int(stats.binom.isf(alpha, trials, max_blocks / 2**n))


def test_single_bit_tamper_detected():
    trials = 10_000
    undetected, max_blocks = tamper_trials(trials)
    assert undetected <= forgery_threshold(trials, max_blocks)


def test_forgery_possible_with_known_key(rng):
    # for blocks (m1, m2, len) the tag is m1 k^3 + m2 k^2 + len k, so a
    # change (d1, d1*k) cancels: detection rests only on k being secret
    n = 32
    k = int(rng.integers(1, 1 << n))
    m = rng.bytes(8)
    d1 = 0x80000001
    d2 = schoolbook_mul(d1, k, n)
    forged = ((int.from_bytes(m[:4], "big") ^ d1).to_bytes(4, "big")
              + (int.from_bytes(m[4:], "big") ^ d2).to_bytes(4, "big"))
    assert forged != m
    assert poly_hash(forged, k, n) == poly_hash(m, k, n) == reference_transcript([m], k, n)
