"""Command-line interface: ``isvs {theory,simulate,estimate,dcs-fit}``.

Configs are INI files with a fixed set of sections and keys; anything
unrecognised is rejected with its line number.  Exit codes: 0 success,
2 bad config or input, 3 guard violation under ``--strict``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import math
import re
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from .reference import PixelMask
from .harness import ReferenceSpec, SweepGrid, TrialConfig, calibrate_cell, estimate_from_raw, make_dynamics, sweep
from .sensor import SensorModel, load_stack
from .temporal_dcs import FitError, autocorrelate_intensity, fit_exponential, write_curve_csv
from .theory import GuardWarning, evaluate_grid, photon_counts

COLUMNS = (
    "method", "tau_s_us", "tau_field_us", "i_s", "i_r", "T_us", "nst", "u_i", "r", "nio",
    "n_trials", "k2_theory", "snr_theory", "tau_hat_mean_us", "tau_hat_sd_us", "snr_empirical",
)

EXIT_OK, EXIT_INPUT, EXIT_GUARD = 0, 2, 3


class ConfigError(ValueError):
    """Invalid configuration; the message names the file line and key."""


def _floats(text: str) -> list[float]:
    parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
    return [float(p) for p in parts]


def _words(text: str) -> list[str]:
    return [p for p in re.split(r"[,\s]+", text.strip()) if p]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none") else float(text)


# section -> key -> (parser, default)
SCHEMA = {
    "output": {"path": (str, None), "format": (str, "csv"), "verbosity": (int, 0)},
    "sensor": {
        "alpha": (float, 1.0),
        "exposure_us": (float, 300.0),
        "read_noise_var": (float, 8.0),
        "offset": (float, 100.0),
        "quantize": (_bool, False),
    },
    "reference": {
        "kind": (str, "uniform"),
        "mean_intensity": (float, 3000.0),
        "shape_param": (_opt_float, None),
        "target_r": (_opt_float, None),
    },
    "grid": {
        "tau_s_us": (_floats, [20.0]),
        "i_s": (_floats, [0.1, 1.0, 10.0, 100.0, 1000.0]),
        "methods": (_words, ["isvs", "svs"]),
        "reference_kinds": (_words, None),
    },
    "theory": {"nio": (int, 2000), "r_values": (_floats, [1.0])},
    "simulation": {
        "n_pixels": (int, 2000),
        "n_frames": (int, 200),
        "n_trials": (int, 100),
        "frame_period_us": (float, 6667.0),
        "master_seed": (int, 0),
        "n_cal": (int, 100),
        "dominance_factor": (float, 10.0),
        "steps_per_tau": (float, 10.0),
        "nst_source": (str, "prior"),
        "sampler": (str, "spectral"),
        "correct_systematic": (_bool, True),
        "tail_fraction": (float, 0.05),
        "budget": (float, 1e10),
        "export_stacks": (str, None),
    },
    "estimate": {
        "method": (str, None),
        "raw": (str, None),
        "dark": (str, None),
        "reference": (str, None),
        "static": (str, None),
        "sample": (str, None),
        "i_s": (_opt_float, None),
        "i_r": (_opt_float, None),
        "nst": (_opt_float, None),
        "nst_source": (str, "prior"),
    },
    "dcs": {"dt_us": (_opt_float, None), "max_lag_us": (float, 100.0), "max_nfev": (int, 100)},
}


def _line_numbers(text: str):
    """Map (section, key) and section names to 1-based line numbers."""
    lines, section = {}, None
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            lines.setdefault(section, n)
            continue
        m = re.match(r"([^=:]+)[=:]", s)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip().lower()), n)
    return lines


def load_config(path=None, text: Optional[str] = None) -> dict:
    """Parse and validate a config; missing keys take schema defaults."""
    if text is None:
        text = Path(path).read_text() if path is not None else ""
    where = str(path) if path is not None else "<config>"
    parser = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    lines = _line_numbers(text)
    out = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{where}:{lines.get(sec, '?')}: unknown section [{sec}]")
        for key, value in parser.items(sec):
            line = lines.get((sec, key), "?")
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{where}:{line}: unknown key {key!r} in [{sec}]")
            conv = SCHEMA[sec][key][0]
            try:
                out[sec][key] = conv(value)
            except ValueError as exc:
                raise ConfigError(f"{where}:{line}: bad value for {sec}.{key}: {exc}") from exc
    return out


# --- output ---------------------------------------------------------------

def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.9g}"


def _json_num(x):
    if x is None:
        return None
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return int(x)
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(f"{x:.9g}")


def point_row(p) -> dict:
    return {
        "method": p.method, "tau_s_us": p.tau_s, "tau_field_us": p.tau_field, "i_s": p.i_s, "i_r": p.i_r,
        "T_us": p.T, "nst": p.nst, "u_i": p.u_i, "r": p.r, "nio": p.nio, "n_trials": p.n_trials,
        "k2_theory": p.k2_theory, "snr_theory": p.snr_theory, "tau_hat_mean_us": p.tau_hat_mean,
        "tau_hat_sd_us": p.tau_hat_sd, "snr_empirical": p.snr_empirical,
    }


def render_table(rows: list[dict], fmt: str, extras: Optional[list[dict]] = None, truncated: Optional[str] = None) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in rows:
            w.writerow([row[c] if c == "method" else _num(row[c]) for c in COLUMNS])
        if truncated:
            buf.write(f"# truncated: {truncated}\n")
        return buf.getvalue()
    if fmt == "json":
        out_rows = []
        for i, row in enumerate(rows):
            rec = {c: (row[c] if c == "method" else _json_num(row[c])) for c in COLUMNS}
            if extras is not None:
                rec.update(extras[i])
            out_rows.append(rec)
        doc = {"columns": list(COLUMNS), "rows": out_rows, "truncated": bool(truncated)}
        if truncated:
            doc["truncation"] = truncated
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"
    raise ConfigError(f"unknown output format {fmt!r}")


def _write(text: str, out: Optional[str]):
    if not out or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# --- config -> objects ----------------------------------------------------

def sensor_from(cfg: dict) -> SensorModel:
    s = cfg["sensor"]
    return SensorModel(
        alpha=s["alpha"], exposure=s["exposure_us"], read_noise_var=s["read_noise_var"],
        offset=s["offset"], quantize=s["quantize"],
    )


def references_from(cfg: dict) -> list[ReferenceSpec]:
    r = cfg["reference"]
    kinds = cfg["grid"]["reference_kinds"] or [r["kind"]]
    return [ReferenceSpec(k, r["mean_intensity"], r["shape_param"], r["target_r"]) for k in kinds]


def base_trial(cfg: dict) -> TrialConfig:
    sim = cfg["simulation"]
    sensor = sensor_from(cfg)
    dyn = make_dynamics(10.0, 1.0, sensor.exposure, sim["n_pixels"], sim["steps_per_tau"], sim["master_seed"])
    return TrialConfig(
        dynamics=dyn,
        reference=references_from(cfg)[0],
        sensor=sensor,
        n_frames=sim["n_frames"],
        frame_period=sim["frame_period_us"],
        n_trials=sim["n_trials"],
        master_seed=sim["master_seed"],
        n_cal=sim["n_cal"],
        dominance_factor=sim["dominance_factor"],
        nst_source=sim["nst_source"],
        sampler=sim["sampler"],
        correct_systematic=sim["correct_systematic"],
        tail_fraction=sim["tail_fraction"],
    )


def _guard_report(points) -> list[str]:
    msgs = []
    for p in points:
        for g in p.guards:
            msgs.append(f"{p.method} tau_s={p.tau_s:g} I_S={p.i_s:g}: {g}")
    return msgs


# --- commands -------------------------------------------------------------

def cmd_theory(cfg: dict, args) -> int:
    g, s = cfg["grid"], sensor_from(cfg)
    i_r = cfg["reference"]["mean_intensity"]
    rows = evaluate_grid(
        g["tau_s_us"], g["i_s"], g["methods"], cfg["theory"]["r_values"],
        T=s.exposure, i_r=i_r, alpha=s.alpha, read_var=s.read_noise_var, nio=cfg["theory"]["nio"],
    )
    msgs = [f"{r.method} tau_s={r.params.tau_s:g} I_S={r.params.i_s:g}: {m}" for r in rows for m in r.guards]
    if _guards_fail(msgs, args):
        return EXIT_GUARD
    table = []
    for r in rows:
        p = r.params
        table.append({
            "method": r.method, "tau_s_us": p.tau_s, "tau_field_us": p.tau_f, "i_s": p.i_s, "i_r": p.i_r,
            "T_us": p.T, "nst": p.nst, "u_i": p.u_i, "r": p.r, "nio": p.nio, "n_trials": 0,
            "k2_theory": r.k2_theory, "snr_theory": r.snr_theory,
            "tau_hat_mean_us": None, "tau_hat_sd_us": None, "snr_empirical": None,
        })
    extras = [{"guards": r.guards} for r in rows]
    _write(render_table(table, args.format, extras), args.out)
    return EXIT_OK


def _guards_fail(msgs: list[str], args) -> bool:
    for m in msgs:
        print(f"guard: {m}", file=sys.stderr)
    return bool(msgs) and args.strict


def cmd_simulate(cfg: dict, args) -> int:
    g = cfg["grid"]
    base = base_trial(cfg)
    grid = SweepGrid(g["tau_s_us"], g["i_s"], g["methods"], references_from(cfg))
    export = cfg["simulation"]["export_stacks"] or None
    if args.strict:
        # evaluate guards up front so nothing is simulated for a rejected config
        theory_only = sweep(grid, _replace_trials(base, 0), steps_per_tau=cfg["simulation"]["steps_per_tau"])
        if _guards_fail(_guard_report(theory_only.points), args):
            return EXIT_GUARD
    res = sweep(
        grid, base, threads=args.threads, budget=cfg["simulation"]["budget"],
        steps_per_tau=cfg["simulation"]["steps_per_tau"], export_dir=export,
    )
    if not args.strict:
        _guards_fail(_guard_report(res.points), args)
    rows = [point_row(p) for p in res.points]
    extras = [{"reference_kind": p.reference_kind, "guards": p.guards, "flags": p.flags,
               "k2_mean": _json_num(p.k2_mean), "k2_sd": _json_num(p.k2_sd)} for p in res.points]
    trunc = f"{len(rows)} of {res.n_cells} cells" if res.truncated else None
    _write(render_table(rows, args.format, extras, trunc), args.out)
    return EXIT_OK


def _replace_trials(base: TrialConfig, n: int) -> TrialConfig:
    return dataclasses.replace(base, n_trials=n)


def _stack_arg(args, cfg, name):
    value = getattr(args, name, None) or cfg["estimate"][name]
    return load_stack(value) if value else None


def cmd_estimate(cfg: dict, args) -> int:
    est_cfg = cfg["estimate"]
    raw = _stack_arg(args, cfg, "raw")
    if raw is None:
        raise ConfigError("estimate needs a raw stack (--raw or [estimate] raw)")
    dark = _stack_arg(args, cfg, "dark")
    if dark is None:
        raise ConfigError("estimate needs a dark stack (--dark or [estimate] dark)")
    if dark.kind != "dark":
        raise ConfigError(f"--dark stack has kind {dark.kind!r}, expected 'dark'")
    reference = _stack_arg(args, cfg, "reference")
    static = _stack_arg(args, cfg, "static")
    sample = _stack_arg(args, cfg, "sample")
    meta = raw.meta or {}
    method = est_cfg["method"] or meta.get("method") or ("isvs" if raw.kind == "raw_interference" else "svs")
    if method == "isvs" and raw.kind not in ("raw_interference", "dark"):
        raise ConfigError(f"iSVS estimate needs a raw_interference stack, got {raw.kind!r}")
    if method == "svs" and raw.kind not in ("sample_only", "dark"):
        raise ConfigError(f"SVS estimate needs a sample_only stack, got {raw.kind!r}")
    if method == "isvs" and (reference is None or reference.kind != "reference_only"):
        raise ConfigError("iSVS estimate needs a reference_only stack (--reference)")
    if static is not None and static.kind != "reference_only":
        raise ConfigError(f"--static stack has kind {static.kind!r}, expected 'reference_only'")
    sensor = raw.sensor or sensor_from(cfg)
    i_s = est_cfg["i_s"] if est_cfg["i_s"] is not None else meta.get("i_s")
    i_r = est_cfg["i_r"] if est_cfg["i_r"] is not None else meta.get("i_r", cfg["reference"]["mean_intensity"])
    nst = est_cfg["nst"] if est_cfg["nst"] is not None else meta.get("nst")
    if nst is None and i_s is not None:
        nst = photon_counts(i_s, sensor.exposure, sensor.alpha)
    nst_source = meta.get("nst_source", est_cfg["nst_source"])
    if nst is None and nst_source != "calibrated":
        raise ConfigError("estimate needs an N_ST prior ([estimate] nst or i_s, or stack metadata)")
    if raw.n_pixels != dark.n_pixels:
        raise ConfigError("raw and dark stacks have different pixel counts")
    mask = None
    if "excluded_pixels" in meta:
        included = np.ones(raw.n_pixels, dtype=bool)
        included[np.asarray(meta["excluded_pixels"], dtype=int)] = False
        mask = PixelMask(included)
    cal, baseline, nst = calibrate_cell(method, dark, nst, reference, static, sample, mask, nst_source)
    u_i = None
    if method == "isvs":
        if i_s is None:
            i_s = nst / photon_counts(1.0, sensor.exposure, sensor.alpha)
        u_i = i_r / i_s
    est = estimate_from_raw(raw.values, baseline, method, sensor.exposure, nst, cal, u_i, mask)
    flags = []
    if est.below_floor:
        flags.append("below_floor")
    if u_i is not None and u_i < 10:
        flags.append("u_i_below_10")
    report = {
        "method": method,
        "n_frames": raw.n_frames,
        "n_pixels_used": int(mask.effective_nio) if mask is not None else raw.n_pixels,
        "T_us": sensor.exposure,
        "nst": _json_num(nst),
        "u_i": _json_num(u_i),
        "k2_frames": [_json_num(v) for v in est.k2_frames],
        "k2_mean": _json_num(est.k2),
        "noise_calibration": {k: _json_num(v) for k, v in cal.to_dict().items()},
        "tau_field_us": _json_num(est.tau_field_us),
        "tau_s_us": _json_num(est.tau_s_us),
        "below_floor": est.below_floor,
        "flags": flags,
    }
    if flags and args.strict and "u_i_below_10" in flags:
        print("guard: U_I < 10", file=sys.stderr)
        return EXIT_GUARD
    _write(json.dumps(report, indent=2) + "\n", args.out)
    return EXIT_OK


def read_series(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """One column (intensity) or two columns (time us, intensity); ``#`` comments allowed."""
    values, times = [], []
    ncols = None
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = [p for p in re.split(r"[,\s]+", s) if p]
            try:
                nums = [float(p) for p in parts]
            except ValueError:
                if ncols is None and i == 1:
                    continue  # header row
                raise ConfigError(f"{path}: row {i} is not numeric: {s!r}") from None
            if ncols is None:
                ncols = len(nums)
                if ncols not in (1, 2):
                    raise ConfigError(f"{path}: row {i} has {ncols} columns, expected 1 or 2")
            elif len(nums) != ncols:
                raise ConfigError(f"{path}: row {i} has {len(nums)} columns, expected {ncols}")
            if ncols == 2:
                times.append(nums[0])
            values.append(nums[-1])
    if not values:
        raise ConfigError(f"{path}: no data rows")
    return np.asarray(values), (np.asarray(times) if times else None)


def cmd_dcs_fit(cfg: dict, args) -> int:
    if not args.series:
        raise ConfigError("dcs-fit needs a series file (--series)")
    series, times = read_series(args.series)
    dt = cfg["dcs"]["dt_us"]
    if times is not None:
        steps = np.diff(times)
        if steps.size == 0 or np.any(steps <= 0) or np.ptp(steps) > 1e-6 * abs(steps.mean()):
            raise ConfigError(f"{args.series}: time column must be uniformly increasing")
        dt = float(steps.mean())
    if dt is None:
        raise ConfigError("dcs-fit needs dt ([dcs] dt_us) for a single-column series")
    try:
        curve = autocorrelate_intensity(series, dt, cfg["dcs"]["max_lag_us"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    fit = fit_exponential(curve, max_nfev=cfg["dcs"]["max_nfev"])
    out = args.out
    if not out or out == "-":
        buf = io.StringIO()
        buf.write("lag_us,g2\n")
        for t, g in curve.to_rows():
            buf.write(f"{t:.9g},{g:.9g}\n")
        sys.stdout.write(buf.getvalue())
        sys.stdout.write(json.dumps({k: _json_num(v) for k, v in fit.to_dict().items()}) + "\n")
        return EXIT_OK
    write_curve_csv(curve, out)
    fit_path = Path(args.fit_out) if args.fit_out else Path(out).with_suffix(".fit.json")
    record = {k: _json_num(v) for k, v in fit.to_dict().items()}
    record.update({"n_samples": int(series.size), "dt_us": _json_num(dt), "max_lag_us": cfg["dcs"]["max_lag_us"]})
    fit_path.write_text(json.dumps(record, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {"theory": cmd_theory, "simulate": cmd_simulate, "estimate": cmd_estimate, "dcs-fit": cmd_dcs_fit}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isvs", description="Interferometric vs direct speckle visibility toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--out", help="output file (default stdout)")
    common.add_argument("--format", choices=("csv", "json"), help="table format (overrides [output] format)")
    common.add_argument("--seed", type=int, help="master seed (overrides [simulation] master_seed)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for simulation")
    common.add_argument("--strict", action="store_true", help="treat guard violations as errors")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("theory", parents=[common], help="closed-form K^2 and SNR table")
    sub.add_parser("simulate", parents=[common], help="Monte Carlo SNR sweep")
    est = sub.add_parser("estimate", parents=[common], help="estimate tau from frame stack files")
    for name in ("raw", "dark", "reference", "static", "sample"):
        est.add_argument(f"--{name}", help=f"{name} stack file")
    dcs = sub.add_parser("dcs-fit", parents=[common], help="autocorrelate a time series and fit an exponential")
    dcs.add_argument("--series", help="one- or two-column numeric series file")
    dcs.add_argument("--fit-out", help="fit JSON path (default: <out>.fit.json)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["simulation"]["master_seed"] = args.seed
        args.format = args.format or cfg["output"]["format"]
        if args.format not in ("csv", "json"):
            raise ConfigError(f"unknown output format {args.format!r}")
        args.out = args.out or cfg["output"]["path"]
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        with warnings.catch_warnings():
            if args.strict:
                warnings.simplefilter("error", GuardWarning)
            else:
                warnings.simplefilter("ignore", GuardWarning)
            return COMMANDS[args.command](cfg, args)
    except GuardWarning as exc:
        print(f"isvs: guard violation: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (ConfigError, ValueError, OSError, FitError) as exc:
        print(f"isvs: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
