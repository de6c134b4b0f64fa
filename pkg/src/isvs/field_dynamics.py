"""Dynamic speckle fields with exponentially decaying field correlation.

Each pixel carries one speckle grain whose complex amplitude follows a
stationary first-order autoregressive (discretised Ornstein-Uhlenbeck)
process with unit mean intensity.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from ._seeding import derive_rng


def model_autocorrelation(t, tau):
    """Exponential decorrelation ``exp(-t / tau)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("lag must be non-negative")
    if tau <= 0:
        raise ValueError("tau must be positive")
    out = np.exp(-t / tau)
    return float(out) if out.ndim == 0 else out


def ar1_coefficient(dt: float, tau_field: float) -> float:
    return math.exp(-dt / tau_field) if math.isfinite(tau_field) else 1.0


@dataclass(frozen=True)
class DynamicsParams:
    """Parameters of a dynamic speckle sequence.

    ``mean_intensity`` is the sample-arm scale (photons/(pixel*ms)) applied by
    the sensor; the generated amplitudes are always normalised to unit mean
    intensity.  ``tau_field=inf`` gives a frozen speckle pattern.
    """

    tau_field: float
    dt: float
    n_steps: int
    n_pixels: int
    mean_intensity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.tau_field > 0 or not self.dt > 0:
            raise ValueError("tau_field and dt must be positive")
        if self.dt > self.tau_field / 5.0:
            raise ValueError(
                f"dt={self.dt:g} us exceeds tau_field/5={self.tau_field / 5:g} us; dynamics would be undersampled"
            )
        if self.n_steps < 1 or self.n_pixels < 1:
            raise ValueError("n_steps and n_pixels must be >= 1")
        if self.mean_intensity < 0:
            raise ValueError("mean_intensity must be non-negative")

    @property
    def tau_s(self) -> float:
        return self.tau_field / 2.0

    @property
    def rho(self) -> float:
        return ar1_coefficient(self.dt, self.tau_field)


@dataclass(frozen=True)
class DynamicSpeckleSequence:
    params: DynamicsParams
    amplitudes: np.ndarray  # (n_steps, n_pixels), complex

    @property
    def n_steps(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.amplitudes.shape[1]

    @property
    def dt(self) -> float:
        return self.params.dt

    @property
    def tau_field(self) -> float:
        return self.params.tau_field

    def intensity(self) -> np.ndarray:
        return self.amplitudes.real**2 + self.amplitudes.imag**2


def circular_gaussian(rng: np.random.Generator, shape, dtype=np.complex128) -> np.ndarray:
    """Unit-power circular complex Gaussian samples (E|z|^2 = 1)."""
    real = np.float32 if dtype == np.complex64 else np.float64
    z = rng.standard_normal((*shape, 2), dtype=real)
    z *= real(math.sqrt(0.5))
    return z.view(dtype)[..., 0]


def gen_dynamic_field(params: DynamicsParams, rng: np.random.Generator | None = None) -> DynamicSpeckleSequence:
    """AR(1) speckle field ``E(t+dt) = rho E(t) + sqrt(1-rho^2) xi``.

    The first step is drawn from the stationary distribution, so every step is
    unit circular Gaussian.  Deterministic given ``params.seed`` unless an
    explicit generator is passed.
    """
    if rng is None:
        rng = derive_rng(params.seed, "field")
    xi = circular_gaussian(rng, (params.n_steps, params.n_pixels))
    rho = params.rho
    if rho == 1.0:
        amps = np.broadcast_to(xi[:1], xi.shape).copy()
    else:
        xi[1:] *= math.sqrt(1.0 - rho * rho)
        amps = lfilter([1.0], [1.0, -rho], xi, axis=0)
    return DynamicSpeckleSequence(params, amps)


def exposure_sums(seq: DynamicSpeckleSequence, start_step: int, n_steps: int):
    """Riemann sums ``(sum |E|^2 dt, sum E dt)`` over an exposure window."""
    if start_step < 0 or start_step + n_steps > seq.n_steps:
        raise ValueError(
            f"exposure window [{start_step}, {start_step + n_steps}) exceeds sequence length {seq.n_steps}"
        )
    window = seq.amplitudes[start_step : start_step + n_steps]
    a = (window.real**2 + window.imag**2).sum(axis=0) * seq.dt
    b = window.sum(axis=0) * seq.dt
    return a, b


@dataclass(frozen=True)
class ExposureModes:
    """Truncated eigen-expansion of the AR(1) covariance over one exposure.

    For ``E = V sqrt(L) z`` with ``z`` iid unit circular Gaussian,
    ``sum |E|^2 dt = dt sum_k L_k |z_k|^2`` and
    ``sum E dt = dt sum_k sqrt(L_k) w_k z_k`` with ``w_k`` the column sums of
    ``V``.  The leading modes are sampled exactly; the residual modes enter
    through Gaussian terms with the exact residual mean and variances.
    """

    dt: float
    n_steps: int
    lam: np.ndarray  # leading eigenvalues
    gain: np.ndarray  # sqrt(lam) * column sums
    tail_mean: float
    tail_var_a: float
    tail_var_b: float

    @property
    def n_modes(self) -> int:
        return self.lam.size


@functools.lru_cache(maxsize=64)
def exposure_modes(tau_field: float, dt: float, n_steps: int, tail_fraction: float = 0.05) -> ExposureModes:
    if n_steps > 4000:
        raise ValueError(f"{n_steps} steps per exposure is too many for the modal sampler; increase dt")
    rho = ar1_coefficient(dt, tau_field)
    idx = np.arange(n_steps)
    cov = rho ** np.abs(idx[:, None] - idx[None, :])
    lam, vec = np.linalg.eigh(cov)
    order = np.argsort(lam)[::-1]
    lam = np.clip(lam[order], 0.0, None)
    vec = vec[:, order]
    wsum = vec.sum(axis=0)
    energy = np.cumsum(lam**2) / np.sum(lam**2)
    k = int(np.searchsorted(energy, 1.0 - tail_fraction) + 1)
    k = min(max(k, 4), n_steps)
    gain_all = np.sqrt(lam) * wsum
    return ExposureModes(
        dt=dt,
        n_steps=n_steps,
        lam=lam[:k].copy(),
        gain=gain_all[:k].copy(),
        tail_mean=float(lam[k:].sum()),
        tail_var_a=float((lam[k:] ** 2).sum()),
        tail_var_b=float((gain_all[k:] ** 2).sum()),
    )


def sample_exposure_sums(
    tau_field: float,
    dt: float,
    n_steps: int,
    shape,
    rng: np.random.Generator,
    tail_fraction: float = 0.05,
):
    """Draw exposure sums ``(sum |E|^2 dt, sum E dt)`` without stepping the field.

    Statistically equivalent to :func:`exposure_sums` applied to a fresh
    stationary :func:`gen_dynamic_field` window of ``n_steps`` steps, at a cost
    of a few random numbers per retained mode instead of per time step.
    """
    shape = tuple(np.atleast_1d(shape))
    if not math.isfinite(tau_field):
        z = circular_gaussian(rng, shape)
        t = dt * n_steps
        return t * (z.real**2 + z.imag**2), t * z
    modes = exposure_modes(float(tau_field), float(dt), int(n_steps), float(tail_fraction))
    n = int(np.prod(shape))
    # Mode parameters are rounded to float32 and the sums are accumulated
    # elementwise instead of by BLAS: eigh and gemm results can differ in the
    # last bit with memory alignment, and the downstream Poisson rejection
    # sampler would turn that into a different random stream.
    lam = (0.5 * modes.lam).astype(np.float32)
    gain = (math.sqrt(0.5) * modes.gain).astype(np.float32)
    z = rng.standard_normal((2, modes.n_modes, n), dtype=np.float32)
    a = np.zeros(n, dtype=np.float32)
    br = np.zeros(n, dtype=np.float32)
    bi = np.zeros(n, dtype=np.float32)
    for k in range(modes.n_modes):
        a += lam[k] * (z[0, k] * z[0, k] + z[1, k] * z[1, k])
        br += gain[k] * z[0, k]
        bi += gain[k] * z[1, k]
    tail = rng.standard_normal((3, n))
    tail_mean, tail_sd_a, tail_sd_b = (
        float(np.float32(v)) for v in (modes.tail_mean, math.sqrt(modes.tail_var_a), math.sqrt(0.5 * modes.tail_var_b))
    )
    a = a + tail_mean + tail_sd_a * tail[0]
    b = (br + tail_sd_b * tail[1]) + 1j * (bi + tail_sd_b * tail[2])
    return (a * dt).reshape(shape), (b * dt).reshape(shape)
