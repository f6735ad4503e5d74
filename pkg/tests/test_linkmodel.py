import math

import numpy as np
import pytest
from scipy import integrate

from fsqkd.linkmodel import (
    LinkParams, RateBudget, accidental_rate, beam_spread_loss_db, capture_fraction,
    diffraction_radius, extrapolate_skr, fig4_grid, long_term_radius, rytov_variance, sweep_loss,
)


def capture_by_quadrature(W: float, a: float) -> float:
    """Integrate the Gaussian intensity 2/(pi W^2) exp(-2 r^2/W^2) over a disk."""
    val, _ = integrate.quad(lambda r: 2 * math.pi * r * 2 / (math.pi * W**2) * math.exp(-2 * r**2 / W**2), 0, a)
    return val


class TestAnchors:
    def test_near_zero_at_1_7_km(self):
        assert beam_spread_loss_db(LinkParams(1700.0)) <= 0.3

    def test_10_km_band(self):
        assert 1.3 <= beam_spread_loss_db(LinkParams(10_000.0)) <= 2.9

    def test_extrapolation(self):
        assert 3300 <= extrapolate_skr(5600, 2.1) <= 3600
        assert extrapolate_skr(5600, 2.1) == pytest.approx(5600 * 10 ** -0.21)

    def test_zero_distance(self):
        assert beam_spread_loss_db(LinkParams(0.0)) == pytest.approx(0.0, abs=1e-4)

    def test_diameter_reading_is_outside_band(self):
        # documented alternative reading of the 40 mm waist
        loss = beam_spread_loss_db(LinkParams(10_000.0, waist_is_diameter=True))
        assert loss == pytest.approx(3.19, abs=0.01)


class TestFormulas:
    def test_rytov(self):
        p = LinkParams(2000.0, cn2=1e-14)
        assert rytov_variance(p) == pytest.approx(1.23e-14 * (2 * math.pi / 810e-9) ** (7 / 6) * 2000 ** (11 / 6))

    def test_diffraction_radius(self):
        p = LinkParams(5000.0, cn2=0)
        z_r = math.pi * 0.04**2 / 810e-9
        assert diffraction_radius(p) == pytest.approx(0.04 * math.sqrt(1 + (5000 / z_r) ** 2))
        assert long_term_radius(p) == diffraction_radius(p)

    @pytest.mark.parametrize("L", [500.0, 3000.0, 10_000.0, 20_000.0])
    @pytest.mark.parametrize("cn2", [1e-16, 1e-15, 1e-14])
    def test_capture_matches_quadrature(self, L, cn2):
        p = LinkParams(L, cn2=cn2)
        assert capture_fraction(p) == pytest.approx(capture_by_quadrature(long_term_radius(p), 0.1), rel=1e-9)

    def test_monotone(self):
        rows = sweep_loss(LinkParams(1.0), fig4_grid(20), [1e-16, 1e-15, 1e-14])
        table = np.array([r[2] for r in rows]).reshape(3, 20)
        assert np.all(np.diff(table, axis=1) >= 0)
        assert np.all(np.diff(table, axis=0) >= 0)
        assert rows[0][:2] == (100.0, 1e-16)

    def test_accidentals(self):
        assert accidental_rate(RateBudget(1.03e6, 1.9e5, window=1e-9)) == pytest.approx(195.7)


class TestValidation:
    @pytest.mark.parametrize("kw", [dict(distance=-1), dict(distance=1, cn2=1e-9), dict(distance=1, waist=0),
                                    dict(distance=1, wavelength=-1e-9)])
    def test_link_params(self, kw):
        with pytest.raises(ValueError):
            LinkParams(**kw)

    def test_rates(self):
        with pytest.raises(ValueError):
            RateBudget(-1, 10)
        with pytest.raises(ValueError):
            RateBudget(10, 10, coinc=11)
        with pytest.raises(ValueError):
            RateBudget(10, 10, window=0)

    def test_skr_and_sweep(self):
        with pytest.raises(ValueError):
            extrapolate_skr(-1, 2)
        with pytest.raises(ValueError):
            sweep_loss(LinkParams(1.0), [], [1e-15])
