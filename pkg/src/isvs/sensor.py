"""Camera acquisition: interference, exposure integration, shot and read noise.

Shot noise is drawn once per exposure as a Poisson variate of the integrated
expected count, which is exact because sums of Poisson variates are Poisson.
"""
from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ._seeding import derive_rng, derive_seed
from .field_dynamics import DynamicSpeckleSequence, DynamicsParams, exposure_sums, gen_dynamic_field
from .reference import ReferenceField
from .theory import US_PER_MS

STACK_KINDS = ("raw_interference", "reference_only", "sample_only", "dark", "calibrated")
CALIBRATION_MODES = ("dark", "reference_only", "sample_only")

# frames further apart than this many field decorrelation times are
# independent enough to be drawn from fresh field realisations
REGENERATE_PERIODS = 20.0


@dataclass(frozen=True)
class SensorModel:
    """Linear camera with Poisson shot noise and Gaussian read noise.

    ``shot_noise`` and ``read_noise`` switch the individual noise sources off
    for variance bookkeeping checks.
    """

    alpha: float = 1.0
    exposure: float = 300.0  # us
    read_noise_var: float = 0.0  # counts^2
    offset: float = 0.0  # counts
    quantize: bool = False
    shot_noise: bool = True
    read_noise: bool = True

    def __post_init__(self):
        if not self.exposure > 0:
            raise ValueError("exposure must be positive")
        if self.read_noise_var < 0:
            raise ValueError("read_noise_var must be non-negative")
        if self.alpha < 0 or self.offset < 0:
            raise ValueError("alpha and offset must be non-negative")

    @property
    def read_noise_sd(self) -> float:
        return math.sqrt(self.read_noise_var)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class FrameStack:
    values: np.ndarray  # (n_frames, n_pixels) counts
    kind: str
    sensor: Optional[SensorModel] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STACK_KINDS:
            raise ValueError(f"unknown stack kind {self.kind!r}")
        if self.values.ndim != 2:
            raise ValueError("frame stack values must be 2-D (frames, pixels)")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.values.shape[1]

    def mean_frame(self) -> np.ndarray:
        return self.values.mean(axis=0)


def stack_kind(sample_scale: float, ref: Optional[ReferenceField]) -> str:
    if sample_scale == 0:
        return "dark" if ref is None else "reference_only"
    return "sample_only" if ref is None else "raw_interference"


def interfere(sample_field, sample_scale: float, ref: Optional[ReferenceField]) -> np.ndarray:
    """Instantaneous intensity ``I_S + I_R + 2 sqrt(I_S I_R) cos(phi_R - phi_S)``."""
    if sample_scale < 0:
        raise ValueError("sample_scale must be non-negative")
    e = np.asarray(sample_field)
    i_s = sample_scale * (e.real**2 + e.imag**2)
    if ref is None:
        return i_s
    if e.shape[-1] != ref.n_pixels:
        raise ValueError(f"field has {e.shape[-1]} pixels, reference has {ref.n_pixels}")
    # sqrt(I_S) cos(phi_R - phi_S) = sqrt(s) Re(E exp(-i phi_R))
    cross = 2.0 * np.sqrt(sample_scale * ref.intensity) * np.real(e * np.exp(-1j * ref.phase))
    return i_s + ref.intensity + cross


def counts_from_sums(a, b, duration, sample_scale, ref, sensor: SensorModel, rng: np.random.Generator):
    """Readout counts from exposure sums ``a = sum |E|^2 dt`` and ``b = sum E dt``.

    The expected count is ``alpha * integral(I dt)`` evaluated by :func:`interfere`
    linearity; ``a`` and ``b`` may be ``None`` when the sample arm is blocked.
    """
    shape = np.shape(a) if a is not None else (ref.n_pixels if ref is not None else 0,)
    integral = np.zeros(shape)
    if sample_scale > 0:
        integral = integral + sample_scale * np.asarray(a)
    if ref is not None:
        integral = integral + ref.intensity * duration
        if sample_scale > 0:
            rot = b * np.exp(-1j * ref.phase)
            integral = integral + 2.0 * np.sqrt(sample_scale * ref.intensity) * rot.real
    mu = sensor.alpha * integral / US_PER_MS
    return add_camera_noise(mu, sensor, rng)


def add_camera_noise(mu, sensor: SensorModel, rng: np.random.Generator) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if sensor.shot_noise:
        # the modal sampler can leave a tiny negative tail in the expectation
        counts = rng.poisson(np.maximum(mu, 0.0)).astype(float)
    else:
        counts = mu.copy()
    counts += sensor.offset
    if sensor.read_noise and sensor.read_noise_var > 0:
        counts += sensor.read_noise_sd * rng.standard_normal(counts.shape)
    if sensor.quantize:
        counts = np.rint(counts)
    return counts


def steps_per_exposure(exposure: float, dt: float) -> int:
    # tolerate round-off in T/dt when dt was chosen to divide T
    return max(1, int(math.ceil(exposure / dt - 1e-9)))


def integrate_exposure(
    seq: DynamicSpeckleSequence,
    sample_scale: float,
    ref: Optional[ReferenceField],
    sensor: SensorModel,
    start_step: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Integrate one exposure window of ``seq`` into noisy counts per pixel.

    The default noise stream is derived from ``(seq seed, "shot", start_step)``.
    """
    n = steps_per_exposure(sensor.exposure, seq.dt)
    if start_step < 0 or start_step + n > seq.n_steps:
        raise ValueError(
            f"exposure window [{start_step}, {start_step + n}) exceeds sequence length {seq.n_steps}"
        )
    if ref is not None and ref.n_pixels != seq.n_pixels:
        raise ValueError(f"field has {seq.n_pixels} pixels, reference has {ref.n_pixels}")
    if rng is None:
        rng = derive_rng(seq.params.seed, "shot", start_step)
    a, b = exposure_sums(seq, start_step, n)
    return counts_from_sums(a, b, n * seq.dt, sample_scale, ref, sensor, rng)


def acquire_stack(
    seq: Union[DynamicSpeckleSequence, DynamicsParams],
    sample_scale: float,
    ref: Optional[ReferenceField],
    sensor: SensorModel,
    n_frames: int,
    frame_period: float,
    regenerate: bool = True,
    stream: str = "",
    meta: Optional[dict] = None,
) -> FrameStack:
    """Acquire ``n_frames`` exposures spaced by ``frame_period`` microseconds.

    Frames whose window lies inside ``seq`` are integrated from it.  Frames
    beyond its end come from fresh field realisations with per-frame derived
    seeds, which is only allowed (``regenerate``) when
    ``frame_period >= 20 tau_field`` so that frames are effectively independent.
    Passing :class:`DynamicsParams` instead of a sequence regenerates every frame.
    ``stream`` separates the random streams of calibration stacks from raw ones.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if frame_period < sensor.exposure:
        raise ValueError(f"frame_period={frame_period:g} us is shorter than the exposure {sensor.exposure:g} us")
    if isinstance(seq, DynamicSpeckleSequence):
        params, base = seq.params, seq
    else:
        params, base = seq, None
    if ref is not None and ref.n_pixels != params.n_pixels:
        raise ValueError(f"field has {params.n_pixels} pixels, reference has {ref.n_pixels}")
    kind = stack_kind(sample_scale, ref)
    n_exp = steps_per_exposure(sensor.exposure, params.dt)
    period_steps = max(n_exp, int(round(frame_period / params.dt)))
    can_regen = regenerate and frame_period >= REGENERATE_PERIODS * params.tau_field
    keys = (stream,) if stream else ()

    if base is None and not can_regen and sample_scale > 0:
        # one long sequence covering every frame window
        span = (n_frames - 1) * period_steps + n_exp
        base = gen_dynamic_field(dataclasses.replace(params, n_steps=span), derive_rng(params.seed, "field", *keys))

    values = np.empty((n_frames, params.n_pixels))
    for k in range(n_frames):
        rng = derive_rng(params.seed, "shot", *keys, k)
        start = k * period_steps
        if sample_scale == 0:
            values[k] = counts_from_sums(None, None, n_exp * params.dt, 0.0, ref, sensor, rng) if ref is not None \
                else add_camera_noise(np.zeros(params.n_pixels), sensor, rng)
            continue
        if base is not None and start + n_exp <= base.n_steps:
            a, b = exposure_sums(base, start, n_exp)
        elif can_regen:
            fp = dataclasses.replace(params, n_steps=n_exp, seed=derive_seed(params.seed, "frame", *keys, k))
            a, b = exposure_sums(gen_dynamic_field(fp), 0, n_exp)
        else:
            raise ValueError(
                f"frame {k} window exceeds the sequence and regeneration needs frame_period >= "
                f"{REGENERATE_PERIODS:g}*tau_field"
            )
        values[k] = counts_from_sums(a, b, n_exp * params.dt, sample_scale, ref, sensor, rng)
    info = {"frame_period": frame_period, "sample_scale": sample_scale}
    info.update(meta or {})
    return FrameStack(values, kind, sensor, info)


def acquire_calibration(
    mode: str,
    seq: Union[DynamicSpeckleSequence, DynamicsParams],
    sample_scale: float,
    ref: Optional[ReferenceField],
    sensor: SensorModel,
    n_frames: int,
    frame_period: float,
    regenerate: bool = True,
) -> FrameStack:
    """Calibration stack with the relevant arm(s) blocked.

    ``dark`` blocks both arms, ``reference_only`` the sample arm and
    ``sample_only`` the reference arm.  Random streams are keyed on ``mode`` so
    calibration frames are independent of the raw stack.
    """
    if mode not in CALIBRATION_MODES:
        raise ValueError(f"unknown calibration mode {mode!r}; expected one of {CALIBRATION_MODES}")
    if mode == "dark":
        sample_scale, ref = 0.0, None
    elif mode == "reference_only":
        if ref is None:
            raise ValueError("reference_only calibration needs a reference field")
        sample_scale = 0.0
    else:
        if not sample_scale > 0:
            raise ValueError("sample_only calibration needs a positive sample_scale")
        ref = None
    return acquire_stack(seq, sample_scale, ref, sensor, n_frames, frame_period, regenerate, stream=mode)


# --- stack file I/O -------------------------------------------------------

def _header(stack: FrameStack, fmt: str) -> dict:
    return {
        "n_frames": stack.n_frames,
        "n_pixels": stack.n_pixels,
        "kind": stack.kind,
        "format": fmt,
        "sensor": stack.sensor.to_dict() if stack.sensor is not None else None,
        "meta": stack.meta,
    }


def save_stack(stack: FrameStack, path, fmt: str = "csv") -> Path:
    """Write a stack as a one-line JSON header followed by CSV rows or raw float64."""
    path = Path(path)
    if fmt not in ("csv", "binary"):
        raise ValueError(f"unknown stack format {fmt!r}")
    header = (json.dumps(_header(stack, fmt), sort_keys=True) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(header)
        if fmt == "csv":
            buf = io.StringIO()
            np.savetxt(buf, stack.values, delimiter=",", fmt="%.17g")
            fh.write(buf.getvalue().encode())
        else:
            fh.write(np.ascontiguousarray(stack.values, dtype="<f8").tobytes())
    return path


def load_stack(path) -> FrameStack:
    path = Path(path)
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: first line is not a JSON stack header") from exc
        body = fh.read()
    for key in ("n_frames", "n_pixels", "kind"):
        if key not in header:
            raise ValueError(f"{path}: stack header missing {key!r}")
    shape = (int(header["n_frames"]), int(header["n_pixels"]))
    if header.get("format", "csv") == "binary":
        values = np.frombuffer(body, dtype="<f8").astype(float)
    else:
        values = np.loadtxt(io.StringIO(body.decode()), delimiter=",", ndmin=2).astype(float)
    if values.size != shape[0] * shape[1]:
        raise ValueError(f"{path}: header says {shape[0]}x{shape[1]} values, found {values.size}")
    sensor = SensorModel(**header["sensor"]) if header.get("sensor") else None
    return FrameStack(values.reshape(shape), header["kind"], sensor, header.get("meta") or {})
