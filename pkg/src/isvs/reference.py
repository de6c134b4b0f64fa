"""Static reference fields, their uniformity ratio, and valid-pixel masks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from ._seeding import derive_rng
from .theory import photon_counts

KINDS = ("uniform", "gaussian_profile", "speckled")


@dataclass(frozen=True)
class ReferenceField:
    intensity: np.ndarray  # photons/(pixel*ms), per pixel
    phase: np.ndarray  # radians, per pixel
    mean_intensity: float
    kind: str = "uniform"

    @property
    def n_pixels(self) -> int:
        return self.intensity.size

    @property
    def r(self) -> float:
        return uniformity_ratio(self)


@dataclass(frozen=True)
class PixelMask:
    included: np.ndarray  # bool per pixel

    @property
    def effective_nio(self) -> int:
        return int(np.count_nonzero(self.included))

    @property
    def n_pixels(self) -> int:
        return self.included.size

    @property
    def excluded_fraction(self) -> float:
        return 1.0 - self.effective_nio / self.n_pixels

    @classmethod
    def all(cls, n_pixels: int) -> "PixelMask":
        return cls(np.ones(n_pixels, dtype=bool))


def _gaussian_envelope(n_pixels: int, waist: float) -> np.ndarray:
    side = math.isqrt(n_pixels)
    if side * side != n_pixels:
        raise ValueError(f"gaussian_profile needs a square pixel count, got {n_pixels}")
    # pixel centres on a unit-span sensor, origin at the centre
    x = (np.arange(side) + 0.5) / side - 0.5
    r2 = x[:, None] ** 2 + x[None, :] ** 2
    return np.exp(-2.0 * r2 / waist**2).ravel()


def make_reference(
    kind: str,
    mean_intensity: float,
    n_pixels: int,
    seed: int = 0,
    shape_param: float | None = None,
) -> ReferenceField:
    """Build a static reference.

    ``uniform``: constant intensity, zero phase.  ``gaussian_profile``: radial
    Gaussian beam over a square grid with waist ``shape_param`` given as a
    fraction of the sensor side.  ``speckled``: fully developed static speckle
    (negative-exponential intensity, uniform phase).  All kinds are rescaled to
    exactly ``mean_intensity``.
    """
    if mean_intensity <= 0:
        raise ValueError("mean_intensity must be positive")
    if n_pixels < 1:
        raise ValueError("n_pixels must be >= 1")
    if kind == "uniform":
        intensity = np.full(n_pixels, float(mean_intensity))
        phase = np.zeros(n_pixels)
    elif kind == "gaussian_profile":
        if shape_param is None or not shape_param > 0:
            raise ValueError("gaussian_profile needs a positive waist fraction (shape_param)")
        env = _gaussian_envelope(n_pixels, shape_param)
        intensity = env * (mean_intensity / env.mean())
        phase = np.zeros(n_pixels)
    elif kind == "speckled":
        rng = derive_rng(seed, "reference", "speckled")
        z = rng.standard_normal((n_pixels, 2))
        intensity = 0.5 * (z**2).sum(axis=1)
        intensity *= mean_intensity / intensity.mean()
        phase = np.mod(np.arctan2(z[:, 1], z[:, 0]), 2.0 * np.pi)
    else:
        raise ValueError(f"unknown reference kind {kind!r}; expected one of {KINDS}")
    return ReferenceField(intensity, phase, float(mean_intensity), kind)


def uniformity_ratio(ref) -> float:
    """``<I^2> / <I>^2`` of the reference intensity (1 for a flat field)."""
    intensity = np.asarray(getattr(ref, "intensity", ref), dtype=float)
    if intensity.size < 1:
        raise ValueError("empty field")
    m = intensity.mean()
    if m == 0:
        raise ValueError("uniformity ratio undefined for an all-zero field")
    # (mean of squared deviations) keeps exact 1.0 for constant fields
    return float(1.0 + np.mean((intensity - m) ** 2) / m**2)


def waist_for_ratio(target_r: float, n_pixels: int) -> float:
    """Gaussian-profile waist fraction that yields uniformity ratio ``target_r``."""
    if target_r <= 1.0:
        raise ValueError("target_r must exceed 1")

    def f(w):
        return uniformity_ratio(_gaussian_envelope(n_pixels, w)) - target_r

    return brentq(f, 0.02, 50.0, xtol=1e-12)


def valid_pixel_mask(
    ref: ReferenceField,
    mean_sample_intensity: float,
    camera_noise_sd: float,
    dominance_factor: float = 10.0,
    *,
    alpha: float = 1.0,
    exposure: float = 300.0,
) -> PixelMask:
    """Keep pixels whose reference dominates the sample and the camera noise.

    A pixel is included iff ``I_R >= dominance_factor * mean_sample_intensity``
    and its expected reference counts per exposure exceed ``camera_noise_sd``.
    """
    if dominance_factor < 1:
        raise ValueError("dominance_factor must be >= 1")
    counts = photon_counts(ref.intensity, exposure, alpha)
    included = (ref.intensity >= dominance_factor * mean_sample_intensity) & (counts > camera_noise_sd)
    return PixelMask(included)
