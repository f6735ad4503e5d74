import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from fsqkd.gf2n import (
    FIELD_SIZES, REDUCTION_TAIL, GfElement, bytes_to_blocks, clmul, gf_mul, gf_mul_int,
    horner, int_to_limbs, limbs_to_int, modulus,
)


def schoolbook_mul(a: int, b: int, n: int) -> int:
    """Shift-and-add with reduction after every shift (independent of clmul/reduce)."""
    mod = modulus(n)
    r = 0
    for i in reversed(range(n)):
        r <<= 1
        if r >> n:
            r ^= mod
        if (b >> i) & 1:
            r ^= a
    return r


def _sympy_poly(n: int, tail: int):
    coeffs = [0] * (n + 1)
    coeffs[0] = 1
    for i in range(tail.bit_length()):
        if tail >> i & 1:
            coeffs[n - i] = 1
    return sympy.Poly(coeffs, sympy.Symbol("x"), modulus=2)


@pytest.mark.parametrize("n", FIELD_SIZES)
def test_reduction_polynomial_irreducible(n):
    assert _sympy_poly(n, REDUCTION_TAIL[n]).is_irreducible


def _poly_gcd(a: int, b: int) -> int:
    while b:
        while a and a.bit_length() >= b.bit_length():
            a ^= b << (a.bit_length() - b.bit_length())
        a, b = b, a
    return a


def ben_or_irreducible(n: int, tail: int) -> bool:
    """Ben-Or test: gcd(f, x^(2^i) - x) = 1 for i = 1..n/2, plain int arithmetic."""
    f = (1 << n) | tail
    xp = 2
    for _ in range(n // 2):
        a, b, sq = xp, xp, 0
        while b:
            if b & 1:
                sq ^= a
            b >>= 1
            a <<= 1
            if a >> n & 1:
                a ^= f
        xp = sq
        if _poly_gcd(f, xp ^ 2) != 1:
            return False
    return True


@pytest.mark.parametrize("n", FIELD_SIZES)
def test_reduction_polynomial_is_least(n):
    assert ben_or_irreducible(n, REDUCTION_TAIL[n])
    assert not any(ben_or_irreducible(n, t) for t in range(1, REDUCTION_TAIL[n], 2))


@pytest.mark.parametrize("n", [32, 64])
def test_least_agrees_with_sympy(n):
    smaller = [t for t in range(1, REDUCTION_TAIL[n], 2)]
    assert not any(_sympy_poly(n, t).is_irreducible for t in smaller)


@pytest.mark.parametrize("n", FIELD_SIZES)
def test_mul_matches_schoolbook(n):
    rng = np.random.default_rng(n)
    for _ in range(1000):
        a = int.from_bytes(rng.bytes(n // 8), "big")
        b = int.from_bytes(rng.bytes(n // 8), "big")
        assert gf_mul_int(a, b, n) == schoolbook_mul(a, b, n)


@pytest.mark.parametrize("n", FIELD_SIZES)
@settings(max_examples=30, deadline=None)
@given(data=st.data())
def test_field_axioms(n, data):
    el = st.integers(0, (1 << n) - 1).map(lambda v: GfElement(v, n))
    a, b, c = data.draw(el), data.draw(el), data.draw(el)
    assert a * b == b * a
    assert (a * b) * c == a * (b * c)
    assert a * (b + c) == a * b + a * c
    assert a * GfElement(1, n) == a
    if a:
        assert a * a.inverse() == GfElement(1, n)


def test_clmul_small():
    # (x + 1)^2 = x^2 + 1 over GF(2)
    assert clmul(0b11, 0b11) == 0b101
    assert clmul(0, 12345) == 0


def test_field_mismatch_and_range():
    with pytest.raises(ValueError, match="mismatch"):
        gf_mul(GfElement(1, 32), GfElement(1, 64))
    with pytest.raises(ValueError):
        GfElement(1 << 32, 32)
    with pytest.raises(ValueError):
        GfElement(1, 48)
    with pytest.raises(ZeroDivisionError):
        GfElement(0, 32).inverse()


@pytest.mark.parametrize("n", FIELD_SIZES)
def test_blocks_and_limbs(n, rng):
    data = rng.bytes(3 * n // 8 + 5)
    blocks = bytes_to_blocks(data, n)
    nb = n // 8
    padded = data + b"\0" * (-len(data) % nb)
    for i, row in enumerate(blocks):
        assert limbs_to_int(row) == int.from_bytes(padded[i * nb:(i + 1) * nb], "big")
    v = int.from_bytes(rng.bytes(nb), "big")
    assert limbs_to_int(int_to_limbs(v, n)) == v


@pytest.mark.parametrize("n", FIELD_SIZES)
@pytest.mark.parametrize("count", [0, 1, 5, 17, 100, 257])
def test_horner_matches_scalar(n, count, rng):
    blocks = bytes_to_blocks(rng.bytes(count * n // 8), n)
    k = int.from_bytes(rng.bytes(n // 8), "big")
    acc = 0
    for row in blocks:
        acc = schoolbook_mul(acc, k, n) ^ limbs_to_int(row)
    assert horner(blocks, k, n) == acc
