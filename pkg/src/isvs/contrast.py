"""Measurement pipeline: reference calibration, speckle contrast, noise-floor
calibration and inversion of K^2 to decorrelation times."""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .reference import PixelMask
from .sensor import FrameStack
from .theory import GuardWarning


@dataclass(frozen=True)
class ContrastResult:
    k2: float
    mean_counts: float
    n_pixels_used: int
    method: str = "isvs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class NoiseCalibration:
    offset_hat: float
    read_var_hat: float
    nst_hat: float
    systematic_k2_offset: float = 0.0

    def __post_init__(self):
        if self.read_var_hat < 0 or self.nst_hat < 0:
            raise ValueError("read_var_hat and nst_hat must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TauEstimate:
    """Decorrelation-time estimate from one (frame-averaged) K^2.

    ``below_floor`` marks a non-positive estimate, i.e. K^2 at or under the
    noise floor.  ``tau_s_frames`` optionally holds the per-frame inversions.
    """

    tau_field_us: float
    tau_s_us: float
    k2: float
    below_floor: bool
    k2_frames: Optional[np.ndarray] = None
    tau_s_frames: Optional[np.ndarray] = None
    calibration: Optional[NoiseCalibration] = None

    @property
    def systematic_k2_offset(self) -> float:
        return self.calibration.systematic_k2_offset if self.calibration is not None else 0.0

    def to_dict(self) -> dict:
        out = {
            "tau_field_us": self.tau_field_us,
            "tau_s_us": self.tau_s_us,
            "k2": self.k2,
            "below_floor": self.below_floor,
        }
        if self.k2_frames is not None:
            out["k2_frames"] = [float(v) for v in self.k2_frames]
        if self.calibration is not None:
            out["noise_calibration"] = self.calibration.to_dict()
        return out


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FrameStack) else np.asarray(x, dtype=float)


def reference_mean_frame(stack: FrameStack) -> np.ndarray:
    """Per-pixel temporal mean of a reference-only calibration stack."""
    if stack.kind != "reference_only":
        raise ValueError(f"reference mean frame needs a reference_only stack, got {stack.kind!r}")
    return stack.mean_frame()


def calibrate_frames(raw: FrameStack, reference_mean) -> FrameStack:
    """Subtract the mean reference frame from every raw frame.

    ``reference_mean`` is either a reference-only :class:`FrameStack` (its
    per-pixel mean is used) or a per-pixel array.  The camera offset is present
    in both and cancels.
    """
    if isinstance(reference_mean, FrameStack):
        reference_mean = reference_mean_frame(reference_mean)
    ref = np.asarray(reference_mean, dtype=float)
    if ref.shape != (raw.n_pixels,):
        raise ValueError(f"reference frame has shape {ref.shape}, stack has {raw.n_pixels} pixels")
    return FrameStack(raw.values - ref, "calibrated", raw.sensor, dict(raw.meta))


def _mask_index(mask, n_pixels: int):
    if mask is None:
        return slice(None), n_pixels
    included = mask.included if isinstance(mask, PixelMask) else np.asarray(mask, dtype=bool)
    if included.shape != (n_pixels,):
        raise ValueError(f"mask has {included.size} entries, frame has {n_pixels} pixels")
    return included, int(np.count_nonzero(included))


def frame_contrasts(frames, mask=None, mean_override: Optional[float] = None) -> np.ndarray:
    """Per-frame K^2 of a (frames, pixels) array; population variance."""
    values = np.atleast_2d(_values(frames))
    idx, n_used = _mask_index(mask, values.shape[1])
    if n_used < 2:
        raise ValueError(f"speckle contrast needs >= 2 included pixels, got {n_used}")
    sub = values[:, idx]
    mean = sub.mean(axis=1)
    var = sub.var(axis=1)
    denom = mean**2 if mean_override is None else np.full_like(mean, float(mean_override) ** 2)
    if np.any(denom == 0):
        raise ValueError("speckle contrast undefined: zero mean and no mean_override")
    return var / denom


def speckle_contrast(
    frame,
    mask=None,
    mean_override: Optional[float] = None,
    method: str = "isvs",
) -> ContrastResult:
    """Squared spatial contrast ``var / mean^2`` over the included pixels.

    With ``mean_override`` (the N_ST prior) the denominator is its square
    instead of the measured spatial mean.
    """
    values = np.asarray(frame, dtype=float).ravel()
    idx, n_used = _mask_index(mask, values.size)
    k2 = float(frame_contrasts(values[None, :], mask, mean_override)[0])
    return ContrastResult(k2, float(values[idx].mean()), n_used, method)


def _check_frames(stack: FrameStack, name: str):
    if stack.n_frames < 2:
        raise ValueError(f"{name} stack needs >= 2 frames, got {stack.n_frames}")


def dark_statistics(dark: FrameStack) -> tuple[float, float]:
    """Pooled offset and read-noise variance of a dark stack."""
    if dark.kind != "dark":
        raise ValueError(f"expected a dark stack, got {dark.kind!r}")
    _check_frames(dark, "dark")
    offset = float(dark.values.mean())
    # per-pixel temporal variance pooled across pixels
    read_var = float(dark.values.var(axis=0, ddof=1).mean())
    return offset, read_var


def systematic_offset(
    static_stacks: Sequence[FrameStack],
    reference_mean,
    offset_hat: float,
    read_var_hat: float,
    nst: float,
    mask=None,
) -> float:
    """Mean measured K^2 of static reference-only stacks minus the predicted floor.

    Each static stack is calibrated with ``reference_mean`` and its K^2 taken
    with the N_ST prior.  The predicted floor is shot plus read variance over
    ``nst^2``; what remains is the empirical systematic error (mostly the
    finite number of frames behind ``reference_mean``).
    """
    measured, floor = [], []
    for st in static_stacks:
        _check_frames(st, "static")
        if st.kind != "reference_only":
            raise ValueError(f"static calibration stacks must be reference_only, got {st.kind!r}")
        cal = calibrate_frames(st, reference_mean)
        measured.append(frame_contrasts(cal, mask, nst).mean())
        idx, _ = _mask_index(mask, st.n_pixels)
        shot = float((st.values[:, idx] - offset_hat).mean())
        floor.append((shot + read_var_hat) / nst**2)
    if not measured:
        return 0.0
    return float(np.mean(measured) - np.mean(floor))


def run_noise_calibration(
    dark: FrameStack,
    sample_only: Optional[FrameStack] = None,
    static_stacks: Sequence[FrameStack] = (),
    *,
    reference_mean=None,
    mask=None,
    nst_prior: Optional[float] = None,
) -> NoiseCalibration:
    """Noise-floor calibration from dark, sample-only and static stacks.

    ``nst_hat`` is the pooled mean of the offset-subtracted sample-only stack;
    when no sample-only stack is given ``nst_prior`` is used instead.  The
    systematic K^2 offset is evaluated against ``nst_prior`` if given, else
    against ``nst_hat``.
    """
    offset_hat, read_var_hat = dark_statistics(dark)
    if sample_only is not None:
        if sample_only.kind != "sample_only":
            raise ValueError(f"expected a sample_only stack, got {sample_only.kind!r}")
        _check_frames(sample_only, "sample_only")
        nst_hat = max(0.0, float(sample_only.values.mean() - offset_hat))
    elif nst_prior is not None:
        nst_hat = float(nst_prior)
    else:
        raise ValueError("need a sample_only stack or an nst_prior")
    sys_k2 = 0.0
    if static_stacks:
        if reference_mean is None:
            raise ValueError("static stacks need the reference mean frame")
        nst = nst_prior if nst_prior is not None else nst_hat
        if not nst > 0:
            raise ValueError("systematic offset needs a positive N_ST")
        sys_k2 = systematic_offset(static_stacks, reference_mean, offset_hat, read_var_hat, nst, mask)
    return NoiseCalibration(offset_hat, read_var_hat, nst_hat, sys_k2)


def _check_inversion(T: float, nst: float):
    if not T > 0:
        raise ValueError("T must be positive")
    if not nst > 0:
        raise ValueError("nst must be positive")


def tau_field_isvs(k2, T: float, u_i: float, nst: float, read_var: float, sys_k2: float = 0.0):
    """Vectorised ``(T / (4 u_i)) (K^2 - sys - u_i/nst - read_var/nst^2)``."""
    return (T / (4.0 * u_i)) * (np.asarray(k2) - sys_k2 - u_i / nst - read_var / nst**2)


def tau_s_svs(k2, T: float, nst: float, read_var: float, sys_k2: float = 0.0):
    return (T / 2.0) * (np.asarray(k2) - sys_k2 - 1.0 / nst - read_var / nst**2)


def tau_from_contrast_isvs(
    k2: float,
    T: float,
    u_i: float,
    nst: float,
    read_var: float = 0.0,
    correction: Optional[NoiseCalibration] = None,
) -> TauEstimate:
    """Invert the iSVS contrast model for the field decorrelation time.

    ``correction`` supplies the systematic K^2 offset to subtract first.
    Non-positive estimates are returned unclamped with ``below_floor`` set.
    """
    _check_inversion(T, nst)
    if not u_i > 0:
        raise ValueError("u_i must be positive")
    if u_i < 10:
        warnings.warn(f"U_I={u_i:g} < 10: the interferometric inversion is outside its regime", GuardWarning, stacklevel=2)
    sys_k2 = correction.systematic_k2_offset if correction is not None else 0.0
    tau_f = float(tau_field_isvs(k2, T, u_i, nst, read_var, sys_k2))
    return TauEstimate(tau_f, tau_f / 2.0, float(k2), tau_f <= 0)


def tau_from_contrast_svs(
    k2: float,
    T: float,
    nst: float,
    read_var: float = 0.0,
    correction: Optional[NoiseCalibration] = None,
) -> TauEstimate:
    """Invert the direct-SVS contrast model for the intensity decorrelation time."""
    _check_inversion(T, nst)
    sys_k2 = correction.systematic_k2_offset if correction is not None else 0.0
    tau_s = float(tau_s_svs(k2, T, nst, read_var, sys_k2))
    return TauEstimate(2.0 * tau_s, tau_s, float(k2), tau_s <= 0)


def estimate_tau(
    k2_frames,
    method: str,
    T: float,
    nst: float,
    read_var: float,
    u_i: Optional[float] = None,
    correction: Optional[NoiseCalibration] = None,
) -> TauEstimate:
    """Average per-frame K^2, invert the mean, and keep per-frame inversions."""
    k2_frames = np.asarray(k2_frames, dtype=float)
    k2_mean = float(k2_frames.mean())
    sys_k2 = correction.systematic_k2_offset if correction is not None else 0.0
    if method == "isvs":
        if u_i is None:
            raise ValueError("iSVS inversion needs u_i")
        est = tau_from_contrast_isvs(k2_mean, T, u_i, nst, read_var, correction)
        per_frame = tau_field_isvs(k2_frames, T, u_i, nst, read_var, sys_k2) / 2.0
    elif method == "svs":
        est = tau_from_contrast_svs(k2_mean, T, nst, read_var, correction)
        per_frame = tau_s_svs(k2_frames, T, nst, read_var, sys_k2)
    else:
        raise ValueError(f"unknown method {method!r}")
    return dataclasses.replace(
        est, k2_frames=k2_frames, tau_s_frames=np.asarray(per_frame, dtype=float), calibration=correction
    )


def empirical_snr(estimates, tau_true: float) -> float:
    """``tau_true`` over the sample standard deviation of the estimates.

    Returns ``inf`` when every estimate is identical.
    """
    est = np.asarray(estimates, dtype=float)
    if est.size < 2:
        raise ValueError("empirical SNR needs >= 2 estimates")
    # identical values can still give a round-off SD from the mean
    if np.ptp(est) == 0:
        return math.inf
    return tau_true / float(est.std(ddof=1))
