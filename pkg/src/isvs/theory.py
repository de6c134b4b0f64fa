"""Closed-form speckle-contrast and SNR models for iSVS and SVS.

Unit convention used throughout the package: times in microseconds, optical
intensities in photons/(pixel*ms), camera readouts in counts.  The only place
the ms/us conversion happens is :func:`photon_counts`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Optional

US_PER_MS = 1000.0


class GuardWarning(UserWarning):
    """A closed-form validity condition (T >> tau, U_I >> 1) is violated."""


def photon_counts(intensity, duration_us, alpha=1.0):
    """Expected counts from ``intensity`` [ph/(pixel*ms)] over ``duration_us``."""
    return alpha * intensity * duration_us / US_PER_MS


def siegert_convert(tau: float, direction: str) -> float:
    """Convert between field and intensity decorrelation times (tau_field = 2 tau_s)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if direction == "field_to_intensity":
        return tau / 2.0
    if direction == "intensity_to_field":
        return tau * 2.0
    raise ValueError(f"unknown direction {direction!r}")


def exposure_integral(tau: float, T: float, finite_exposure: bool = False) -> float:
    """``int_0^T 2 (1 - t/T) exp(-t/tau) dt``.

    With ``finite_exposure=False`` the long-exposure limit ``2 tau`` is returned.
    """
    if not finite_exposure:
        return 2.0 * tau
    x = T / tau
    return 2.0 * tau * (1.0 - (1.0 - math.exp(-x)) / x)


@dataclass(frozen=True)
class TheoryParams:
    tau_s: float
    T: float
    i_s: float
    i_r: float = 0.0
    alpha: float = 1.0
    read_var: float = 0.0
    nio: int = 2000
    r: float = 1.0
    tau_field: Optional[float] = None
    # decay-shape multiplier; 1 for exponential decorrelation
    c: float = 1.0

    def __post_init__(self):
        if self.tau_s <= 0 or self.T <= 0:
            raise ValueError("tau_s and T must be positive")
        if self.i_s <= 0:
            raise ValueError("i_s must be positive")
        if self.i_r < 0 or self.read_var < 0 or self.alpha <= 0:
            raise ValueError("i_r, read_var must be >= 0 and alpha > 0")
        if self.r < 1:
            raise ValueError("uniformity ratio r must be >= 1")
        if self.nio < 1:
            raise ValueError("nio must be >= 1")

    @property
    def tau_f(self) -> float:
        return self.tau_field if self.tau_field is not None else 2.0 * self.tau_s

    @property
    def nst(self) -> float:
        return photon_counts(self.i_s, self.T, self.alpha)

    @property
    def u_i(self) -> float:
        return self.i_r / self.i_s

    def guard_violations(self, method: str = "isvs") -> list[str]:
        out = []
        if self.T < 10.0 * self.tau_f:
            out.append(f"T={self.T:g} us < 10*tau_field={10 * self.tau_f:g} us")
        if method == "isvs" and self.u_i < 10.0:
            out.append(f"U_I={self.u_i:g} < 10")
        return out

    def check_guards(self, method: str = "isvs") -> bool:
        msgs = self.guard_violations(method)
        for m in msgs:
            warnings.warn(m, GuardWarning, stacklevel=3)
        return not msgs


def k2_numerator_terms(p: TheoryParams, finite_exposure: bool = False):
    """Variance contributions of the calibrated image, in counts^2.

    Returns ``(sample_term, cross_term, shot_term)``: sample intensity
    fluctuation, sample/reference interference, reference shot noise.
    """
    p.check_guards("isvs")
    a_s = p.alpha * p.i_s / US_PER_MS  # counts per us
    a_r = p.alpha * p.i_r / US_PER_MS
    sample = p.c * a_s**2 * p.T * exposure_integral(p.tau_s, p.T, finite_exposure)
    cross = 2.0 * p.c * a_r * a_s * p.T * exposure_integral(p.tau_f, p.T, finite_exposure)
    shot = a_r * p.T
    return sample, cross, shot


def k2_isvs(
    p: TheoryParams,
    include_camera_noise: bool = True,
    full: bool = False,
    finite_exposure: bool = False,
) -> float:
    """Squared contrast of the reference-calibrated interferogram.

    ``full=True`` keeps the (normally negligible) sample-intensity term;
    ``finite_exposure=True`` evaluates the exposure integrals exactly instead
    of in the ``T >> tau`` limit.
    """
    sample, cross, shot = k2_numerator_terms(p, finite_exposure)
    num = cross + shot
    if full:
        num += sample
    if include_camera_noise:
        num += p.read_var
    return num / p.nst**2


def k2_svs(p: TheoryParams, include_camera_noise: bool = True, finite_exposure: bool = False) -> float:
    """Squared contrast of a direct (no reference) exposure."""
    p.check_guards("svs")
    a_s = p.alpha * p.i_s / US_PER_MS
    num = p.c * a_s**2 * p.T * exposure_integral(p.tau_s, p.T, finite_exposure) + p.nst
    if include_camera_noise:
        num += p.read_var
    return num / p.nst**2


def contrast_sampling_se(k2: float, r: float, nio: int) -> float:
    """Measurement-to-measurement standard deviation of an estimated K^2."""
    if nio < 2:
        raise ValueError("nio must be >= 2")
    if r < 1:
        raise ValueError("r must be >= 1")
    return k2 * math.sqrt((3.0 * r - 1.0) / nio)


def snr_isvs(p: TheoryParams, include_camera_noise: bool = True, in_terms_of: str = "tau_field") -> float:
    p.check_guards("isvs")
    noise = 1.0 / p.nst
    if include_camera_noise:
        noise += p.read_var / (p.u_i * p.nst**2)
    if in_terms_of == "tau_field":
        lever = p.T / (4.0 * p.tau_f)
    elif in_terms_of == "tau_s":
        lever = p.T / (8.0 * p.tau_s)
    else:
        raise ValueError(f"unknown in_terms_of {in_terms_of!r}")
    return math.sqrt(p.nio / (3.0 * p.r - 1.0)) / (1.0 + lever * noise)


def snr_svs(p: TheoryParams, include_camera_noise: bool = True) -> float:
    p.check_guards("svs")
    noise = 1.0 / p.nst
    if include_camera_noise:
        noise += p.read_var / p.nst**2
    return math.sqrt(p.nio / 2.0) / (1.0 + (p.T / p.tau_s) * noise)


def snr(p: TheoryParams, method: str, include_camera_noise: bool = True) -> float:
    if method == "isvs":
        return snr_isvs(p, include_camera_noise)
    if method == "svs":
        return snr_svs(p, include_camera_noise)
    raise ValueError(f"unknown method {method!r}")


def k2(p: TheoryParams, method: str, include_camera_noise: bool = True) -> float:
    if method == "isvs":
        return k2_isvs(p, include_camera_noise)
    if method == "svs":
        return k2_svs(p, include_camera_noise)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class TheoryRow:
    method: str
    params: TheoryParams
    k2_theory: float
    snr_theory: float
    guards: list = field(default_factory=list)


def evaluate_grid(
    tau_s: Iterable[float],
    i_s: Iterable[float],
    methods: Iterable[str],
    r_values: Iterable[float],
    **base,
) -> list[TheoryRow]:
    """Evaluate K^2 and SNR for every (method, tau_s, i_s, r) combination.

    Rows come back sorted by (method, i_s, tau_s, r).  Guard violations are
    recorded on the row rather than emitted as warnings.  SVS has no reference
    arm, so its rows carry ``i_r = 0`` and ``r = 1`` and are not repeated per r.
    """
    rows, seen = [], set()
    for method, ts, is_, r in product(list(methods), list(tau_s), list(i_s), list(r_values)):
        kw = dict(base)
        if method == "svs":
            kw["i_r"], r = 0.0, 1.0
            if (ts, is_) in seen:
                continue
            seen.add((ts, is_))
        p = TheoryParams(tau_s=ts, i_s=is_, r=r, **kw)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", GuardWarning)
            rows.append(TheoryRow(method, p, k2(p, method), snr(p, method), p.guard_violations(method)))
    rows.sort(key=lambda row: (row.method, row.params.i_s, row.params.tau_s, row.params.r))
    return rows
