"""Free-space link budget, accidental coincidences and key-rate scaling.

The beam-spreading model is the usual Gaussian-beam treatment for
Kolmogorov turbulence: a diffraction-limited spot W(L) widened by a
long-term turbulence factor, captured by a circular receiver aperture.
Pointing errors are assumed to be removed by beam stabilization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

CN2_RANGE = (1e-18, 1e-12)


@dataclass(frozen=True)
class LinkParams:
    """Optical channel parameters, SI units.

    ``waist`` is the 1/e^2 intensity radius of the transmitted beam; with
    ``waist_is_diameter`` the same number is read as a diameter instead.
    ``cn2 = 0`` switches turbulence off (pure diffraction).
    """

    distance: float
    cn2: float = 1e-15
    wavelength: float = 810e-9
    waist: float = 0.04
    rx_aperture_diam: float = 0.200
    waist_is_diameter: bool = False

    def __post_init__(self):
        for name in ("wavelength", "waist", "rx_aperture_diam"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.distance < 0:
            raise ValueError(f"distance must be non-negative, got {self.distance}")
        if self.cn2 != 0 and not CN2_RANGE[0] <= self.cn2 <= CN2_RANGE[1]:
            raise ValueError(f"cn2 must lie in [{CN2_RANGE[0]:g}, {CN2_RANGE[1]:g}] m^-2/3, got {self.cn2:g}")

    @property
    def k(self) -> float:
        return 2 * math.pi / self.wavelength

    @property
    def w0(self) -> float:
        return self.waist / 2 if self.waist_is_diameter else self.waist


@dataclass(frozen=True)
class RateBudget:
    """Detector count rates (counts/s) and coincidence window (s)."""

    singles_a: float
    singles_b: float
    coinc: float = 0.0
    window: float = 1e-9
    noise_a: float = 0.0
    noise_b: float = 0.0

    def __post_init__(self):
        rates = (self.singles_a, self.singles_b, self.coinc, self.noise_a, self.noise_b)
        if min(rates) < 0:
            raise ValueError("rates must be non-negative")
        if self.window <= 0:
            raise ValueError("coincidence window must be positive")
        if self.coinc > min(self.singles_a, self.singles_b):
            raise ValueError("coincidence rate cannot exceed either singles rate")


def rytov_variance(p: LinkParams) -> float:
    """Plane-wave Rytov variance 1.23 Cn^2 k^(7/6) L^(11/6)."""
    return 1.23 * p.cn2 * p.k ** (7 / 6) * p.distance ** (11 / 6)


def diffraction_radius(p: LinkParams) -> float:
    """Vacuum beam radius W(L) = W0 sqrt(1 + (L/z_R)^2)."""
    z_r = math.pi * p.w0 ** 2 / p.wavelength
    return p.w0 * math.sqrt(1 + (p.distance / z_r) ** 2)


def long_term_radius(p: LinkParams) -> float:
    """Turbulence-broadened (long-term) spot radius at the receiver."""
    w = diffraction_radius(p)
    if p.distance == 0:
        return w
    fresnel = 2 * p.distance / (p.k * w ** 2)
    return w * math.sqrt(1 + 1.33 * rytov_variance(p) * fresnel ** (5 / 6))


def capture_fraction(p: LinkParams) -> float:
    """Fraction of a Gaussian spot inside the receiver aperture."""
    a = p.rx_aperture_diam / 2
    return -math.expm1(-2 * a ** 2 / long_term_radius(p) ** 2)


def beam_spread_loss_db(p: LinkParams) -> float:
    """Average loss from diffraction and turbulence-induced spreading, dB >= 0."""
    return max(-10 * math.log10(capture_fraction(p)), 0.0)


def accidental_rate(b: RateBudget) -> float:
    """Expected accidental coincidences singles_a * singles_b * window."""
    return b.singles_a * b.singles_b * b.window


def extrapolate_skr(base_skr: float, extra_loss_db: float) -> float:
    """Scale a key rate linearly with extra channel transmission 10^(-dB/10).

    Valid when received signal dominates noise.
    """
    if base_skr < 0:
        raise ValueError("base key rate must be non-negative")
    return base_skr * 10 ** (-extra_loss_db / 10)


def sweep_loss(p: LinkParams, distances, cn2s) -> list[tuple[float, float, float]]:
    """Loss table of (L, Cn^2, dB) rows over a distance x turbulence grid."""
    distances = list(distances)
    cn2s = list(cn2s)
    if not distances or not cn2s:
        raise ValueError("distance and cn2 lists must be non-empty")
    return [(float(L), float(c), beam_spread_loss_db(replace(p, distance=float(L), cn2=float(c))))
            for c in cn2s for L in distances]


def fig4_grid(n: int = 60) -> np.ndarray:
    """Default distance grid, 0.1 to 20 km."""
    return np.linspace(100.0, 20_000.0, n)
