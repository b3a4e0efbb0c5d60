"""End-to-end runs: sample -> propagation -> sensor readout -> spectrum -> files."""

from __future__ import annotations

import contextlib
import csv
import json
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import constants
from .config import ExperimentConfig, validate
from .control import NoisePath, NoiseProcess
from .engine import (
    ClusterBatch,
    Programs,
    build_cycle_propagators,
    initial_kets,
    propagate_fast,
    propagate_reference,
)
from .sample import GeometryConfig, f2_quadrature, place_pairs, sample_bloch
from .sensor import ReadoutConfig, ensemble_average, records_from_quadratures, sensor_quadratures
from .spectra import (
    Spectrum,
    TimeSeries,
    find_peaks,
    height_near,
    predict_lines,
    to_spectrum,
    write_peaks_json,
    write_spectrum_csv,
    write_svg,
    write_timeseries_csv,
)

SWEEP_AXES = {
    "phi_error": "drive.phi_error_deg",
    "noise_sigma": "drive.noise_sigma",
    "nu": "field.nu",
    "pair_count": "sample.pair_count",
}


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Sampled sensors: per-sensor geometries and all pairs as one batch."""

    geometries: list
    batch: ClusterBatch
    weights: np.ndarray  # (S, K) coupling weights, K = 2 * pair_count

    @property
    def sensors(self) -> int:
        return len(self.geometries)


@dataclass(frozen=True, eq=False)
class RunResult:
    config: ExperimentConfig
    series: TimeSeries
    stderr: np.ndarray
    spectrum: Spectrum
    meta: dict
    quadratures: np.ndarray | None = None  # (shots, S, W) complex, if kept


def _streams(seed: int):
    """Independent generators for geometry, initial states, drive noise and readout noise."""
    root = np.random.SeedSequence(seed)
    geo, bloch, noise, readout = root.spawn(4)
    return geo, bloch, noise, readout


def build_ensemble(config: ExperimentConfig, geo_seq: np.random.SeedSequence) -> Ensemble:
    s = config.sample
    gcfg = GeometryConfig(
        nv_depth=s.nv_depth, pair_count=s.pair_count, internuclear_distance=s.internuclear_distance,
        exclusion_radius=s.exclusion_radius,
        group_principal_values=tuple(tuple(float(v) for v in g) for g in s.group_principal_values),
    )
    f2 = f2_quadrature(s.nv_depth)
    geometries, pairs = [], []
    for child in geo_seq.spawn(config.readout.sensors):
        geom, prs = place_pairs(gcfg, np.random.default_rng(child), f2=f2)
        geometries.append(geom)
        pairs.extend(prs)
    weights = np.array([g.coupling_weights for g in geometries])
    return Ensemble(geometries, ClusterBatch.from_pairs(pairs), weights)


def _initial_states(config, programs, n_pairs, seq):
    rng = np.random.default_rng(seq)
    b = sample_bloch(2 * n_pairs, config.x, rng)
    theta = b.theta.reshape(n_pairs, 2)
    phi = b.phi.reshape(n_pairs, 2)
    return initial_kets(theta, phi, programs.fieldprog)


def _noise_path(config, seq) -> NoisePath | None:
    d = config.drive
    if d.noise_sigma == 0:
        return None
    proc = NoiseProcess(d.noise_sigma, d.noise_tau, dt=d.noise_dt)
    duration = config.readout.windows / config.field.nu
    return NoisePath.generate(proc, duration, np.random.default_rng(seq))


def simulate(config: ExperimentConfig, threads: int = 1, keep_quadratures: bool = False,
             ensemble: Ensemble | None = None) -> RunResult:
    """Full pipeline for a validated config; returns the ensemble signal and its spectrum."""
    config = validate(config)
    limit = threadpool_limits(1) if config.run.bit_reproducible else contextlib.nullcontext()
    with limit:
        return _simulate(config, threads, keep_quadratures, ensemble)


def _simulate(config, threads, keep_quadratures, ensemble):
    t_start = time.perf_counter()
    geo_seq, bloch_seq, noise_seq, readout_seq = _streams(config.run.seed)
    fieldprog, drive = config.field_program(), config.drive_program()
    readout = ReadoutConfig(
        dd_sequence=config.readout.dd_sequence, carrier_choice=config.readout.carrier_choice,
        T1_memory=config.readout.T1, windows=config.readout.windows,
        readout_noise=config.readout.readout_noise,
    ).resolve(drive)
    ens = ensemble or build_ensemble(config, geo_seq)
    W = config.readout.windows
    S, K = ens.weights.shape
    mode = config.run.propagation_mode
    quiet = Programs(fieldprog, drive)
    props = None
    if mode == "ip_rwa_bs":
        props = build_cycle_propagators(ens.batch, quiet, config.run.oversample, threads=threads)
    t_built = time.perf_counter()

    shot_seqs = list(zip(bloch_seq.spawn(config.readout.shots), noise_seq.spawn(config.readout.shots)))
    readout_rngs = [np.random.default_rng(s) for s in readout_seq.spawn(config.readout.shots)]
    corr, quads = [], []
    for (bseq, nseq), rrng in zip(shot_seqs, readout_rngs):
        programs = Programs(fieldprog, drive, _noise_path(config, nseq))
        psi0 = _initial_states(config, programs, ens.batch.size, bseq)
        if props is not None:
            rec = propagate_fast(props, programs, psi0, W - 1, ens.batch.n_sites, threads=threads)
        else:
            rec = propagate_reference(ens.batch, programs, psi0, W - 1, mode, config.run.oversample)
        vals = rec.values.reshape(W, S, K, 3)
        z = sensor_quadratures(vals[..., 0], vals[..., 1], ens.weights)
        records = records_from_quadratures(z, readout, fieldprog.nu, rrng)
        corr.append(np.array([r.correlation for r in records]))
        if keep_quadratures:
            quads.append(z)
    avg = ensemble_average(np.concatenate(corr))
    tau = 1.0 / fieldprog.nu
    series = TimeSeries(tau, avg.mean, {"mode": mode, "field_mode": fieldprog.mode})
    spec = to_spectrum(series, config.run.spectrum_window, config.run.zero_pad)
    pred = predict_lines(config.iso_shifts(), drive)
    peaks = find_peaks(spec, config.run.peak_prominence * max(spec.magnitude.max(), 1e-300))
    spec = spec.with_peaks(peaks, pred.lines)
    t_end = time.perf_counter()
    meta = run_metadata(config, drive, readout, ens, pred)
    meta["timing_s"] = {"build": round(t_built - t_start, 3), "total": round(t_end - t_start, 3)}
    return RunResult(config, series, avg.stderr, spec, meta, np.array(quads) if keep_quadratures else None)


def run_metadata(config, drive, readout, ens, pred) -> dict:
    from .sample import dipolar_prefactor

    return {
        "tool_version": tool_version(),
        "seed": config.run.seed,
        "derived": {
            "Omega_hz": drive.Omega,
            "Delta_hz": drive.Delta,
            "Omega_eff_hz": drive.Omega_eff,
            "bloch_siegert_hz": drive.bloch_siegert,
            "bloch_siegert_line_hz": pred.bloch_siegert,
            "predicted_lines_hz": list(pred.lines),
            "dipolar_max_hz": dipolar_prefactor(config.sample.internuclear_distance),
            "filter_carrier_hz": readout.carrier,
            "t_prob_s": readout.t_prob,
            "x_beta_gamma_b0": config.x,
            "sensors": ens.sensors,
            "pairs": ens.batch.size,
            "F2_per_volume": ens.geometries[0].F2 / ens.geometries[0].volume,
        },
        "constants": {
            "mu0": constants.MU0,
            "planck": constants.PLANCK,
            "gamma_proton_hz_per_t": constants.GAMMA_PROTON,
            "gamma_electron_hz_per_t": readout.gamma_e,
            "gamma_nitrogen_hz_per_t": readout.gamma_n,
        },
    }


def line_summary(result: RunResult, tolerance_hz: float = 10.0) -> list[dict]:
    """For each predicted line: nearest detected peak, its shift and the height at the line."""
    out = []
    for line in result.spectrum.predicted:
        near = [pk for pk in result.spectrum.peaks if abs(pk.frequency - line) <= tolerance_hz]
        best = min(near, key=lambda pk: abs(pk.frequency - line)) if near else None
        out.append({
            "predicted_hz": float(line),
            "peak_hz": None if best is None else best.frequency,
            "shift_hz": None if best is None else best.frequency - float(line),
            "height": height_near(result.spectrum, line),
        })
    return out


def write_outputs(result: RunResult, out_dir, svg: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(result.config.to_yaml())
    write_timeseries_csv(out / "timeseries.csv", result.series, result.stderr)
    write_spectrum_csv(out / "spectrum.csv", result.spectrum)
    write_peaks_json(out / "peaks.json", result.spectrum, {"lines": line_summary(result)})
    meta = dict(result.meta)
    if result.config.run.bit_reproducible:
        meta.pop("timing_s", None)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if svg:
        write_svg(out / "spectrum.svg", result.spectrum, title=f"mode {result.config.field.mode}")
    return out


def run(config: ExperimentConfig, out_dir=None, threads: int = 1, svg: bool = False) -> RunResult:
    result = simulate(config, threads)
    write_outputs(result, out_dir or config.run.output_dir, svg)
    return result


def sweep(config: ExperimentConfig, axis: str, values, out_dir=None, threads: int = 1,
          svg: bool = False) -> list[RunResult]:
    """One run per value (same seed, so sample draws are matched) plus summary.csv."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    root = Path(out_dir or config.run.output_dir)
    path = SWEEP_AXES[axis]
    results, rows = [], []
    for v in values:
        v = int(v) if axis == "pair_count" else float(v)
        cfg = config.replace(path, v)
        res = simulate(cfg, threads)
        write_outputs(res, root / f"{axis}={v:g}", svg)
        results.append(res)
        lines = line_summary(res)
        row = {"value": v}
        for i, ln in enumerate(lines, 1):
            row[f"peak_{i}_hz"] = ln["peak_hz"]
            row[f"height_{i}"] = ln["height"]
            row[f"shift_{i}_hz"] = ln["shift_hz"]
        rows.append(row)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if val is None else (repr(val) if isinstance(val, float) else val))
                        for k, val in row.items()})
    return results
