"""Temporal autocorrelation of speckle time series and exponential fitting."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .field_dynamics import DynamicSpeckleSequence


class DegenerateCurveError(ValueError):
    """The curve has no positive dynamic range to fit."""


class FitError(RuntimeError):
    """The nonlinear fit did not converge within its iteration cap."""


@dataclass(frozen=True)
class AutocorrCurve:
    lags: np.ndarray  # us
    g2_values: np.ndarray
    n_samples: np.ndarray  # lagged products averaged per lag
    se: Optional[np.ndarray] = None  # across independent series, when available

    def to_rows(self):
        return [(float(t), float(g)) for t, g in zip(self.lags, self.g2_values)]


@dataclass(frozen=True)
class FieldCorrCurve:
    lags: np.ndarray
    g1_values: np.ndarray  # complex
    n_samples: np.ndarray
    se: Optional[np.ndarray] = None  # of the real part


@dataclass(frozen=True)
class ExpFit:
    tau_hat: float
    beta_hat: float
    baseline: float
    rms_residual: float
    n_iterations: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _lag_count(n: int, dt: float, max_lag: float) -> int:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if max_lag < dt:
        raise ValueError(f"max_lag={max_lag:g} us is shorter than dt={dt:g} us")
    n_lags = int(math.floor(max_lag / dt + 1e-9))
    if n < 10 * n_lags:
        raise ValueError(f"series of {n} samples is too short for {n_lags} lags (need >= {10 * n_lags})")
    return n_lags


def _lagged_products(x: np.ndarray, n_lags: int) -> np.ndarray:
    """Unbiased ``mean_t x[t] conj(x[t+k])`` for k = 0..n_lags, per row, via FFT."""
    n = x.shape[1]
    size = 1 << int(math.ceil(math.log2(2 * n)))
    f = np.fft.fft(x, size, axis=1)
    raw = np.fft.ifft(f * np.conj(f), axis=1)[:, : n_lags + 1]
    # ifft(F conj F)[k] = sum_t x[t+k] conj(x[t]); conjugate to get x[t] conj(x[t+k])
    raw = np.conj(raw)
    counts = n - np.arange(n_lags + 1)
    return raw / counts, counts


def _se(per_row: np.ndarray) -> Optional[np.ndarray]:
    if per_row.shape[0] < 2:
        return None
    return per_row.std(axis=0, ddof=1) / math.sqrt(per_row.shape[0])


def autocorrelate_intensity(series, dt: float, max_lag: float) -> AutocorrCurve:
    """``g2(t) = <I(0) I(t)> / <I>^2`` on a linear lag grid up to ``max_lag``.

    ``series`` is one series or a 2-D array with one independent series per
    row; rows are averaged and their spread gives the standard error.
    """
    x = np.atleast_2d(np.asarray(series, dtype=float))
    n_lags = _lag_count(x.shape[1], dt, max_lag)
    mean = x.mean()
    if mean == 0:
        raise ValueError("zero-mean series: g2 is undefined")
    products, counts = _lagged_products(x, n_lags)
    per_row = products.real / mean**2
    lags = dt * np.arange(n_lags + 1)
    return AutocorrCurve(lags, per_row.mean(axis=0), counts * x.shape[0], _se(per_row))


def autocorrelate_field(seq, max_lag: float, dt: Optional[float] = None) -> FieldCorrCurve:
    """Complex ``g1(t) = <E(0) E*(t)> / <|E|^2>`` averaged over pixels and origins.

    Accepts a :class:`DynamicSpeckleSequence` or a complex (steps, pixels)
    array together with ``dt``.
    """
    if isinstance(seq, DynamicSpeckleSequence):
        amps, dt = seq.amplitudes, seq.dt
    else:
        if dt is None:
            raise ValueError("dt is required for a bare amplitude array")
        amps = np.asarray(seq)
        if amps.ndim == 1:
            amps = amps[:, None]
    x = np.ascontiguousarray(amps.T)
    n_lags = _lag_count(x.shape[1], dt, max_lag)
    power = float(np.mean(x.real**2 + x.imag**2))
    if power == 0:
        raise ValueError("zero field: g1 is undefined")
    products, counts = _lagged_products(x, n_lags)
    per_row = products / power
    lags = dt * np.arange(n_lags + 1)
    return FieldCorrCurve(lags, per_row.mean(axis=0), counts * x.shape[0], _se(per_row.real))


def _initial_guess(t: np.ndarray, g: np.ndarray):
    n_tail = max(1, int(round(0.2 * t.size)))
    baseline = float(g[-n_tail:].mean())
    beta = float(g[0] - baseline)
    if not beta > 0:
        raise DegenerateCurveError("curve has no positive dynamic range above its baseline")
    y = (g - baseline) / beta
    # first decade of decay: contiguous run from lag 0 while y > 0.1
    stop = np.argmax(y <= 0.1) if np.any(y <= 0.1) else y.size
    sel = slice(0, max(stop, 2))
    yy = np.clip(y[sel], 1e-12, None)
    slope = np.polyfit(t[sel], np.log(yy), 1)[0] if stop >= 2 else 0.0
    tau = -1.0 / slope if slope < 0 else max(t[-1] / 5.0, t[1] - t[0])
    return baseline, beta, tau


def fit_exponential(curve: AutocorrCurve, max_nfev: int = 100, xtol: float = 1e-10) -> ExpFit:
    """Fit ``g2(t) = baseline + beta exp(-t / tau)`` by damped Gauss-Newton.

    Starts from a tail-mean baseline and a log-linear fit of the first decade
    of decay, then refines with Levenberg-Marquardt.
    """
    t = np.asarray(curve.lags, dtype=float)
    g = np.asarray(curve.g2_values, dtype=float)
    if t.size < 5:
        raise ValueError(f"need >= 5 lags to fit, got {t.size}")
    if np.ptp(g) <= 1e-14 * max(1.0, abs(float(g.mean()))):
        raise DegenerateCurveError("flat curve: nothing to fit")
    b0, beta0, tau0 = _initial_guess(t, g)

    def resid(p):
        return p[0] + p[1] * np.exp(-t / p[2]) - g

    def jac(p):
        e = np.exp(-t / p[2])
        return np.column_stack([np.ones_like(t), e, p[1] * e * t / p[2] ** 2])

    res = least_squares(
        resid, [b0, beta0, tau0], jac=jac, method="lm", xtol=xtol, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev
    )
    if res.status <= 0:
        raise FitError(f"exponential fit did not converge after {res.nfev} evaluations: {res.message}")
    baseline, beta, tau = (float(v) for v in res.x)
    if not tau > 0 or not math.isfinite(tau):
        raise FitError(f"fit returned a non-physical tau={tau:g}")
    rms = float(math.sqrt(np.mean(res.fun**2)))
    return ExpFit(tau, beta, baseline, rms, int(res.nfev))


def write_curve_csv(curve: AutocorrCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag_us", "g2"])
        for t, g in curve.to_rows():
            w.writerow([f"{t:.9g}", f"{g:.9g}"])
