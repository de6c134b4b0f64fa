"""Monte Carlo orchestration: repeated acquisitions, empirical SNR, grid sweeps.

Randomness is keyed, never sequential: every stream is derived from the master
seed and a path such as ``(trial, "field", dynamics key, chunk)``.  Grid cells
that share dynamics reuse the same field realisations within a trial (each
cell still sees an exact realisation of its own model), which is what makes
sweeps cheap; results are therefore independent of worker count and of the
order in which cells are listed.
"""
from __future__ import annotations

import dataclasses
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from ._seeding import derive_rng, derive_seed
from .contrast import (
    NoiseCalibration,
    TauEstimate,
    calibrate_frames,
    empirical_snr,
    estimate_tau,
    frame_contrasts,
    reference_mean_frame,
    run_noise_calibration,
)
from .field_dynamics import DynamicsParams, ar1_coefficient, circular_gaussian, exposure_modes, sample_exposure_sums
from .reference import PixelMask, ReferenceField, make_reference, uniformity_ratio, valid_pixel_mask, waist_for_ratio
from .sensor import REGENERATE_PERIODS, FrameStack, SensorModel, add_camera_noise, counts_from_sums, save_stack, steps_per_exposure
from .theory import GuardWarning, TheoryParams, k2, photon_counts, snr

METHODS = ("isvs", "svs")
SAMPLERS = ("spectral", "ar1")
NST_SOURCES = ("prior", "calibrated")
CHUNK_FRAMES = 50


def _canon(x) -> str:
    # stream keys must not depend on whether a value was written as 100 or 100.0
    return "None" if x is None else repr(float(x))


@dataclass(frozen=True)
class ReferenceSpec:
    """Recipe for the static reference; ``target_r`` picks a Gaussian-profile waist."""

    kind: str = "uniform"
    mean_intensity: float = 3000.0
    shape_param: Optional[float] = None
    target_r: Optional[float] = None

    @property
    def key(self) -> str:
        return "|".join([self.kind] + [_canon(v) for v in (self.mean_intensity, self.shape_param, self.target_r)])

    def build(self, n_pixels: int, seed: int) -> ReferenceField:
        shape = self.shape_param
        if self.kind == "gaussian_profile" and shape is None:
            if self.target_r is None:
                raise ValueError("gaussian_profile reference needs shape_param or target_r")
            shape = waist_for_ratio(self.target_r, n_pixels)
        return make_reference(self.kind, self.mean_intensity, n_pixels, seed, shape)


@dataclass(frozen=True)
class TrialConfig:
    """One grid cell of the Monte Carlo experiment.

    ``dynamics.mean_intensity`` is the sample intensity and ``dynamics.dt``
    the integration step; ``dynamics.n_steps`` and ``dynamics.seed`` are not
    used (exposure length comes from the sensor, randomness from
    ``master_seed``).  ``n_cal`` frames go into each calibration stack.
    ``sampler="spectral"`` draws exposure sums from the modal expansion when
    frames are independent; otherwise the field is stepped as AR(1).
    """

    dynamics: DynamicsParams
    reference: ReferenceSpec
    sensor: SensorModel
    method: str = "isvs"
    n_frames: int = 200
    frame_period: float = 6667.0
    n_trials: int = 200
    master_seed: int = 0
    n_cal: int = 100
    dominance_factor: float = 10.0
    nst_source: str = "prior"
    sampler: str = "spectral"
    correct_systematic: bool = True
    tail_fraction: float = 0.05

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.nst_source not in NST_SOURCES:
            raise ValueError(f"unknown nst_source {self.nst_source!r}")
        if self.n_frames < 1 or self.n_trials < 0:
            raise ValueError("n_frames must be >= 1 and n_trials >= 0")
        if self.n_cal < 2:
            raise ValueError("n_cal must be >= 2")
        if self.frame_period < self.sensor.exposure:
            raise ValueError("frame_period must be at least the exposure")
        if not self.dynamics.mean_intensity > 0:
            raise ValueError("sample intensity (dynamics.mean_intensity) must be positive")

    @property
    def tau_s(self) -> float:
        return self.dynamics.tau_s

    @property
    def i_s(self) -> float:
        return self.dynamics.mean_intensity

    @property
    def i_r(self) -> float:
        return self.reference.mean_intensity if self.method == "isvs" else 0.0

    @property
    def nst(self) -> float:
        return photon_counts(self.i_s, self.sensor.exposure, self.sensor.alpha)

    @property
    def n_exp(self) -> int:
        return steps_per_exposure(self.sensor.exposure, self.dynamics.dt)

    @property
    def dynamics_key(self) -> str:
        d = self.dynamics
        floats = "|".join(_canon(v) for v in (d.tau_field, d.dt, self.sensor.exposure, self.frame_period, self.tail_fraction))
        return f"{floats}|{d.n_pixels}|{self.n_frames}|{self.sampler}"

    @property
    def cell_key(self) -> str:
        ref = self.reference.key if self.method == "isvs" else "-"
        return f"{self.method}|{_canon(self.i_s)}|{ref}|{self.dynamics_key}"

    @property
    def independent_frames(self) -> bool:
        return self.frame_period >= REGENERATE_PERIODS * self.dynamics.tau_field


def make_dynamics(tau_s: float, i_s: float, exposure: float, n_pixels: int, steps_per_tau: float = 10.0, seed: int = 0):
    """Dynamics with ``dt`` dividing the exposure into ~``steps_per_tau`` steps per tau_field."""
    tau_field = 2.0 * float(tau_s)
    n_exp = int(math.ceil(steps_per_tau * exposure / tau_field - 1e-9))
    dt = exposure / n_exp
    return DynamicsParams(tau_field, dt, n_exp, n_pixels, i_s, seed)


@dataclass
class SnrPoint:
    method: str
    tau_s: float
    tau_field: float
    i_s: float
    i_r: float
    T: float
    nst: float
    u_i: float
    r: float
    nio: int
    n_trials: int
    k2_theory: float
    snr_theory: float
    tau_hat_mean: Optional[float] = None
    tau_hat_sd: Optional[float] = None
    snr_empirical: Optional[float] = None
    reference_kind: str = ""
    k2_mean: Optional[float] = None
    k2_sd: Optional[float] = None
    n_k2: int = 0
    below_floor_fraction: Optional[float] = None
    guards: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def tau_true(self) -> float:
        return self.tau_s

    @property
    def sort_key(self):
        return (self.method, self.i_s, self.tau_s, self.r, self.reference_kind)


@dataclass
class SweepResult:
    points: list
    truncated: bool = False
    n_cells: int = 0
    work: float = 0.0


@dataclass(frozen=True)
class SweepGrid:
    tau_s: Sequence[float]
    i_s: Sequence[float]
    methods: Sequence[str] = METHODS
    references: Sequence[ReferenceSpec] = (ReferenceSpec(),)


# --- per-trial building blocks -------------------------------------------

@dataclass
class _Setup:
    """Deterministic, trial-independent parts of a cell."""

    cfg: TrialConfig
    ref: Optional[ReferenceField]
    mask: PixelMask
    rotor: Optional[np.ndarray]  # 2 sqrt(I_S I_R) exp(-i phi_R), per pixel
    flags: list


def _setup(cfg: TrialConfig) -> _Setup:
    npx = cfg.dynamics.n_pixels
    flags = []
    if cfg.method == "svs":
        return _Setup(cfg, None, PixelMask.all(npx), None, flags)
    ref = cfg.reference.build(npx, derive_seed_ref(cfg))
    mask = valid_pixel_mask(
        ref,
        cfg.i_s,
        cfg.sensor.read_noise_sd,
        cfg.dominance_factor,
        alpha=cfg.sensor.alpha,
        exposure=cfg.sensor.exposure,
    )
    if mask.effective_nio < 2:
        warnings.warn(
            f"valid-pixel mask keeps {mask.effective_nio} pixels at I_S={cfg.i_s:g}; using all pixels",
            GuardWarning,
            stacklevel=3,
        )
        mask = PixelMask.all(npx)
        flags.append("mask_fallback")
    rotor = 2.0 * np.sqrt(cfg.i_s * ref.intensity) * np.exp(-1j * ref.phase)
    return _Setup(cfg, ref, mask, rotor, flags)


def derive_seed_ref(cfg: TrialConfig) -> int:
    # one fixed reference realisation per recipe, shared by all trials
    return derive_seed(cfg.master_seed, "reference", cfg.reference.key)


def _dark_stack(cfg: TrialConfig, trial: int) -> FrameStack:
    rng = derive_rng(cfg.master_seed, trial, "dark")
    values = add_camera_noise(np.zeros((cfg.n_cal, cfg.dynamics.n_pixels)), cfg.sensor, rng)
    return FrameStack(values, "dark", cfg.sensor)


def _reference_stack(setup: _Setup, trial: int, stream: str) -> FrameStack:
    cfg = setup.cfg
    rng = derive_rng(cfg.master_seed, trial, stream, cfg.reference.key)
    mu = photon_counts(setup.ref.intensity, cfg.n_exp * cfg.dynamics.dt, cfg.sensor.alpha)
    values = add_camera_noise(np.broadcast_to(mu, (cfg.n_cal, mu.size)), cfg.sensor, rng)
    return FrameStack(values, "reference_only", cfg.sensor)


class _FieldSource:
    """Exposure sums ``(A, B)`` for consecutive frame chunks of one trial."""

    def __init__(self, cfg: TrialConfig, trial: int, stream: str = "field"):
        self.cfg = cfg
        self.trial = trial
        self.stream = stream
        d = cfg.dynamics
        self.n_exp = cfg.n_exp
        self.spectral = cfg.sampler == "spectral" and cfg.independent_frames
        if not self.spectral:
            self.rng = derive_rng(cfg.master_seed, trial, stream, cfg.dynamics_key)
            self.rho = ar1_coefficient(d.dt, d.tau_field)
            period_steps = max(self.n_exp, int(round(cfg.frame_period / d.dt)))
            # steps from the last sample of one exposure to the first of the next
            self.jump = self.rho ** (period_steps - self.n_exp + 1)
            self.state = circular_gaussian(self.rng, (d.n_pixels,))

    def chunk(self, index: int, n_frames: int):
        cfg, d = self.cfg, self.cfg.dynamics
        if self.spectral:
            rng = derive_rng(cfg.master_seed, self.trial, self.stream, cfg.dynamics_key, index)
            return sample_exposure_sums(d.tau_field, d.dt, self.n_exp, (n_frames, d.n_pixels), rng, cfg.tail_fraction)
        a = np.empty((n_frames, d.n_pixels))
        b = np.empty((n_frames, d.n_pixels), dtype=complex)
        innov = math.sqrt(1.0 - self.rho**2)
        jump_innov = math.sqrt(1.0 - self.jump**2)
        for k in range(n_frames):
            x = circular_gaussian(self.rng, (self.n_exp, d.n_pixels))
            x[0] = self.state
            x[1:] *= innov
            e = lfilter([1.0], [1.0, -self.rho], x, axis=0)
            a[k] = (e.real**2 + e.imag**2).sum(axis=0) * d.dt
            b[k] = e.sum(axis=0) * d.dt
            self.state = self.jump * e[-1] + jump_innov * circular_gaussian(self.rng, (d.n_pixels,))
        return a, b


def _raw_chunk(setup: _Setup, a, b, mean_ref_counts, trial: int, index: int) -> np.ndarray:
    """Noisy counts for a chunk of exposures of one cell."""
    cfg = setup.cfg
    scale = cfg.sensor.alpha / 1000.0
    mu = cfg.i_s * a
    if setup.ref is not None:
        mu = mu + (b * setup.rotor).real
        mu *= scale
        mu += mean_ref_counts
    else:
        mu *= scale
    rng = derive_rng(cfg.master_seed, trial, "raw", cfg.cell_key, index)
    return add_camera_noise(mu, cfg.sensor, rng)


def _sample_only_stack(setup: _Setup, trial: int) -> FrameStack:
    cfg = setup.cfg
    d = cfg.dynamics
    rng = derive_rng(cfg.master_seed, trial, "sample_only_field", cfg.dynamics_key)
    a, b = sample_exposure_sums(d.tau_field, d.dt, cfg.n_exp, (cfg.n_cal, d.n_pixels), rng, cfg.tail_fraction)
    values = counts_from_sums(a, b, cfg.n_exp * d.dt, cfg.i_s, None, cfg.sensor,
                              derive_rng(cfg.master_seed, trial, "sample_only", cfg.cell_key))
    return FrameStack(values, "sample_only", cfg.sensor)


def calibrate_cell(
    method: str,
    dark: FrameStack,
    nst_prior: float,
    reference: Optional[FrameStack] = None,
    static: Optional[FrameStack] = None,
    sample_only: Optional[FrameStack] = None,
    mask=None,
    nst_source: str = "prior",
):
    """Noise calibration and the per-pixel baseline to subtract from raw frames.

    Returns ``(calibration, baseline, nst)`` where ``nst`` is the N_ST value
    used for the contrast denominator and the inversion.
    """
    if nst_source == "calibrated":
        if sample_only is None:
            raise ValueError("nst_source='calibrated' needs a sample_only stack")
        cal0 = run_noise_calibration(dark, sample_only)
        nst = cal0.nst_hat
        if not nst > 0:
            raise ValueError("calibrated N_ST is not positive")
    else:
        nst = nst_prior
    if method == "isvs":
        if reference is None:
            raise ValueError("iSVS calibration needs a reference_only stack")
        ref_mean = reference_mean_frame(reference)
        statics = [static] if static is not None else []
        cal = run_noise_calibration(dark, sample_only, statics, reference_mean=ref_mean, mask=mask, nst_prior=nst)
        baseline = ref_mean
    else:
        cal = run_noise_calibration(dark, sample_only, nst_prior=nst)
        baseline = np.full(dark.n_pixels, cal.offset_hat)
    return cal, baseline, nst


def estimate_from_raw(
    raw_values,
    baseline,
    method: str,
    T: float,
    nst: float,
    cal: NoiseCalibration,
    u_i: Optional[float] = None,
    mask=None,
) -> TauEstimate:
    """Per-frame K^2 of calibrated frames, averaged and inverted."""
    stack = FrameStack(np.atleast_2d(raw_values), "raw_interference" if method == "isvs" else "sample_only")
    calibrated = calibrate_frames(stack, baseline)
    k2_frames = frame_contrasts(calibrated, mask, nst)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GuardWarning)
        return estimate_tau(k2_frames, method, T, nst, cal.read_var_hat, u_i, cal)


class _TrialCache:
    """Calibration stacks of one trial, shared by every cell that can use them."""

    def __init__(self, trial: int):
        self.trial = trial
        self._stacks = {}

    def _get(self, key, make):
        if key not in self._stacks:
            self._stacks[key] = make()
        return self._stacks[key]

    def dark(self, cfg: TrialConfig) -> FrameStack:
        key = ("dark", cfg.sensor, cfg.n_cal, cfg.dynamics.n_pixels, cfg.master_seed)
        return self._get(key, lambda: _dark_stack(cfg, self.trial))

    def reference(self, setup: _Setup, stream: str) -> FrameStack:
        cfg = setup.cfg
        key = (stream, cfg.reference.key, cfg.sensor, cfg.n_exp * cfg.dynamics.dt, cfg.n_cal, cfg.dynamics.n_pixels,
               cfg.master_seed)
        return self._get(key, lambda: _reference_stack(setup, self.trial, stream))


def _run_cells_trial(
    setups: Sequence[_Setup],
    trial: int,
    export_dir: Optional[Path] = None,
    cache: Optional[_TrialCache] = None,
) -> list[TauEstimate]:
    """One trial of every cell of a dynamics group, sharing field realisations."""
    cache = cache if cache is not None else _TrialCache(trial)
    cfg0 = setups[0].cfg
    dark = cache.dark(cfg0)
    per_cell = []
    for s in setups:
        cfg = s.cfg
        reference = static = sample_only = None
        if cfg.method == "isvs":
            reference = cache.reference(s, "refcal")
            if cfg.correct_systematic:
                static = cache.reference(s, "static")
        if cfg.nst_source == "calibrated":
            sample_only = _sample_only_stack(s, trial)
        cal, baseline, nst = calibrate_cell(
            cfg.method, dark, cfg.nst, reference, static, sample_only, s.mask, cfg.nst_source
        )
        ref_counts = (
            photon_counts(s.ref.intensity, cfg.n_exp * cfg.dynamics.dt, cfg.sensor.alpha) if s.ref is not None else None
        )
        per_cell.append((cal, baseline, nst, ref_counts, reference, static, sample_only))

    source = _FieldSource(cfg0, trial)
    k2_parts = [[] for _ in setups]
    raw_parts = [[] for _ in setups] if export_dir is not None else None
    for index, start in enumerate(range(0, cfg0.n_frames, CHUNK_FRAMES)):
        nf = min(CHUNK_FRAMES, cfg0.n_frames - start)
        a, b = source.chunk(index, nf)
        for j, s in enumerate(setups):
            cal, baseline, nst, ref_counts = per_cell[j][:4]
            raw = _raw_chunk(s, a, b, ref_counts, trial, index)
            if raw_parts is not None:
                raw_parts[j].append(raw)
            calibrated = calibrate_frames(FrameStack(raw, "raw_interference"), baseline)
            k2_parts[j].append(frame_contrasts(calibrated, s.mask, nst))

    out = []
    for j, s in enumerate(setups):
        cfg = s.cfg
        cal, baseline, nst = per_cell[j][:3]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", GuardWarning)
            est = estimate_tau(
                np.concatenate(k2_parts[j]), cfg.method, cfg.sensor.exposure, nst, cal.read_var_hat,
                cfg.i_r / cfg.i_s if cfg.method == "isvs" else None, cal,
            )
        out.append(est)
        if raw_parts is not None:
            _export_cell(export_dir, s, dark, per_cell[j], np.concatenate(raw_parts[j]))
    return out


def cell_file_stem(cfg: TrialConfig) -> str:
    ref = f"_{cfg.reference.kind}" if cfg.method == "isvs" else ""
    return f"{cfg.method}{ref}_tau{cfg.tau_s:.9g}_is{cfg.i_s:.9g}"


def _export_cell(export_dir: Path, s: _Setup, dark: FrameStack, parts, raw_values):
    cfg = s.cfg
    _, _, nst, _, reference, static, sample_only = parts
    meta = {
        "method": cfg.method,
        "tau_s_us": cfg.tau_s,
        "tau_field_us": cfg.dynamics.tau_field,
        "i_s": cfg.i_s,
        "i_r": cfg.i_r,
        "nst": nst,
        "nst_source": cfg.nst_source,
        "excluded_pixels": [int(i) for i in np.flatnonzero(~s.mask.included)],
    }
    kind = "raw_interference" if cfg.method == "isvs" else "sample_only"
    stem = Path(export_dir) / cell_file_stem(cfg)
    save_stack(FrameStack(raw_values, kind, cfg.sensor, meta), f"{stem}_raw.stack", "binary")
    save_stack(FrameStack(dark.values, "dark", cfg.sensor, meta), f"{stem}_dark.stack", "binary")
    if reference is not None:
        save_stack(FrameStack(reference.values, "reference_only", cfg.sensor, meta), f"{stem}_reference.stack", "binary")
    if static is not None:
        save_stack(FrameStack(static.values, "reference_only", cfg.sensor, meta), f"{stem}_static.stack", "binary")
    if sample_only is not None:
        save_stack(FrameStack(sample_only.values, "sample_only", cfg.sensor, meta), f"{stem}_sample.stack", "binary")


def run_trial(cfg: TrialConfig, trial_index: int) -> TauEstimate:
    """One full acquisition and estimation pass for one cell.

    Identical to that cell's contribution to :func:`sweep` with the same seed.
    """
    return _run_cells_trial([_setup(cfg)], trial_index)[0]


# --- sweeps ---------------------------------------------------------------

def cell_work(cfg: TrialConfig) -> float:
    """Work units for one trial: field modes (or steps) plus sensor pixel-exposures."""
    d = cfg.dynamics
    if cfg.sampler == "spectral" and cfg.independent_frames:
        per_exposure = exposure_modes(d.tau_field, d.dt, cfg.n_exp, cfg.tail_fraction).n_modes
    else:
        per_exposure = cfg.n_exp
    return float(cfg.n_frames) * d.n_pixels * per_exposure


def theory_params(cfg: TrialConfig, r: float, nio: int) -> TheoryParams:
    return TheoryParams(
        tau_s=cfg.tau_s,
        T=cfg.sensor.exposure,
        i_s=cfg.i_s,
        i_r=cfg.i_r,
        alpha=cfg.sensor.alpha,
        read_var=cfg.sensor.read_noise_var,
        nio=nio,
        r=r,
        tau_field=cfg.dynamics.tau_field,
    )


def _point(setup: _Setup, estimates: Optional[list]) -> SnrPoint:
    cfg = setup.cfg
    # heterogeneity of the pixels that actually enter the contrast
    r = float(uniformity_ratio(setup.ref.intensity[setup.mask.included])) if setup.ref is not None else 1.0
    nio = setup.mask.effective_nio
    p = theory_params(cfg, r, nio)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GuardWarning)
        guards = p.guard_violations(cfg.method)
        k2_t, snr_t = k2(p, cfg.method), snr(p, cfg.method)
    if not cfg.independent_frames:
        guards.append(f"frame_period={cfg.frame_period:g} us < {REGENERATE_PERIODS:g}*tau_field")
    pt = SnrPoint(
        method=cfg.method,
        tau_s=cfg.tau_s,
        tau_field=cfg.dynamics.tau_field,
        i_s=cfg.i_s,
        i_r=cfg.i_r,
        T=cfg.sensor.exposure,
        nst=cfg.nst,
        u_i=cfg.i_r / cfg.i_s,
        r=r,
        nio=nio,
        n_trials=cfg.n_trials,
        k2_theory=k2_t,
        snr_theory=snr_t,
        reference_kind=cfg.reference.kind if cfg.method == "isvs" else "none",
        guards=guards,
        flags=list(setup.flags),
    )
    if estimates:
        per_frame = np.concatenate([e.tau_s_frames for e in estimates])
        # K^2 net of the calibrated systematic offset, comparable with theory
        k2_all = np.concatenate([e.k2_frames - e.systematic_k2_offset for e in estimates])
        pt.tau_hat_mean = float(np.mean([e.tau_s_us for e in estimates]))
        # measurement-to-measurement spread: individual (per-frame) estimates
        pt.tau_hat_sd = float(per_frame.std(ddof=1)) if per_frame.size > 1 else None
        snr_e = empirical_snr(per_frame, cfg.tau_s) if per_frame.size > 1 else None
        if snr_e is not None and math.isinf(snr_e):
            pt.flags.append("snr_infinite")
        pt.snr_empirical = snr_e
        pt.k2_mean = float(k2_all.mean())
        pt.k2_sd = float(k2_all.std(ddof=1)) if k2_all.size > 1 else None
        pt.n_k2 = int(k2_all.size)
        pt.below_floor_fraction = float(np.mean(per_frame <= 0))
    return pt


def expand_grid(grid: SweepGrid, base: TrialConfig, steps_per_tau: float = 10.0) -> list[TrialConfig]:
    """Cells of a grid, one SVS cell per (tau_s, I_S) irrespective of references."""
    cells = {}
    for method in grid.methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        refs = list(grid.references) if method == "isvs" else [base.reference]
        for ref in refs:
            for ts in grid.tau_s:
                for i_s in grid.i_s:
                    dyn = make_dynamics(ts, i_s, base.sensor.exposure, base.dynamics.n_pixels, steps_per_tau, base.master_seed)
                    cfg = dataclasses.replace(base, dynamics=dyn, reference=ref, method=method)
                    cells.setdefault(cfg.cell_key, cfg)
    return list(cells.values())


def sweep(
    grid,
    base: TrialConfig,
    threads: int = 1,
    budget: float = 1e10,
    steps_per_tau: float = 10.0,
    export_dir=None,
) -> SweepResult:
    """Run every grid cell and return SNR points sorted by (method, I_S, tau_s, R).

    ``grid`` is a :class:`SweepGrid` or an explicit list of :class:`TrialConfig`.
    Empirical columns are filled when ``n_trials >= 2``.  Dynamics groups are
    admitted in a fixed order until ``budget`` work units would be exceeded;
    the remaining cells are dropped and the result is marked truncated.
    ``export_dir`` writes trial-0 frame stacks of every simulated cell.
    """
    cells = list(grid) if not isinstance(grid, SweepGrid) else expand_grid(grid, base, steps_per_tau)
    cells_by_key = {}
    for c in cells:
        cells_by_key.setdefault(c.cell_key, c)
    groups = {}
    for key in sorted(cells_by_key):
        c = cells_by_key[key]
        groups.setdefault(c.dynamics_key, []).append(c)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GuardWarning)
        setups = {k: [_setup(c) for c in g] for k, g in groups.items()}

    simulate = [k for k in sorted(groups) if groups[k][0].n_trials >= 2]
    admitted, work, truncated = [], 0.0, False
    for k in simulate:
        g = groups[k]
        w = g[0].n_trials * (cell_work(g[0]) + float(len(g)) * g[0].n_frames * g[0].dynamics.n_pixels)
        if work + w > budget:
            truncated = True
            break
        admitted.append(k)
        work += w

    export = Path(export_dir) if export_dir is not None else None
    if export is not None:
        export.mkdir(parents=True, exist_ok=True)
    n_max = max((groups[k][0].n_trials for k in admitted), default=0)
    tasks = list(range(n_max))

    def run(t):
        # one task per trial index so calibration stacks are drawn once per trial
        cache = _TrialCache(t)
        out = {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", GuardWarning)
            for k in admitted:
                if t < groups[k][0].n_trials:
                    out[k] = _run_cells_trial(setups[k], t, export if t == 0 else None, cache)
        return out

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(task) for task in tasks]

    by_group = {k: [[] for _ in groups[k]] for k in admitted}
    for per_trial in results:
        for k, ests in per_trial.items():
            for j, e in enumerate(ests):
                by_group[k][j].append(e)

    points = []
    for k in sorted(groups):
        if truncated and k not in admitted and groups[k][0].n_trials >= 2:
            continue
        for j, s in enumerate(setups[k]):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", GuardWarning)
                points.append(_point(s, by_group[k][j] if k in by_group else None))
    points.sort(key=lambda p: p.sort_key)
    return SweepResult(points, truncated, len(cells_by_key), work)


def snr_table(points: Iterable[SnrPoint]) -> list[dict]:
    return [dataclasses.asdict(p) for p in points]
