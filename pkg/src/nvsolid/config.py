"""Experiment configuration: nested dataclasses, YAML round-trip and validation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .constants import MAGIC_ANGLE
from .control import DRIVE_VARIANTS, FIELD_MODES, MISALIGNMENT_MODELS, DriveProgram, FieldProgram
from .engine import MIN_OVERSAMPLE, MODES, ClusterBatch, LAB_STEP_BUDGET, Programs, step_grid
from .sample import ShiftTensor, thermal_x
from .sensor import CARRIERS, DD_PATTERNS
from .spectra import WINDOWS

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Validation failure; `errors` holds (field path, message) pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.errors))


@dataclass
class SampleConfig:
    group_principal_values: list = field(
        default_factory=lambda: [[352.0, 22.0, 456.0], [221.0, 27.0, 74.0]]
    )
    internuclear_distance: float = 0.25e-9
    pair_count: int = 16
    nv_depth: float = 5e-9
    exclusion_radius: float = 0.4e-9
    # beta gamma B0; None means thermal at `temperature` and the field's B0
    x: float | None = None
    temperature: float = 300.0


@dataclass
class FieldConfig:
    B0: float = 2.0
    nu: float = 1000.0
    epsilon: float | None = None  # None: magic angle
    mode: str = "rotating_field"


@dataclass
class DriveConfig:
    omega: float = 84e6
    p: int = 448
    alpha: float = math.pi / 2
    geometry_variant: str = "modulated"
    phi_error_deg: float = 1.0
    misalignment_azimuth_deg: float = 0.0
    misalignment_model: str = "rigid"
    noise_sigma: float = 0.0025
    noise_tau: float = 1e-3
    noise_dt: float = 1e-5
    fslg: bool = True
    nutations_per_interval: float = 1.0
    geometric_compensation: bool = True


@dataclass
class ReadoutBlock:
    dd_sequence: str = "XY8"
    carrier_choice: str = "omega_tilde"
    T1: float = 1.0
    windows: int = 512
    sensors: int = 64
    shots: int = 1
    readout_noise: float = 0.0


@dataclass
class RunConfig:
    propagation_mode: str = "ip_rwa_bs"
    oversample: float = 20.0
    seed: int = 0
    output_dir: str = "runs/default"
    bit_reproducible: bool = False
    spectrum_window: str = "hann"
    zero_pad: int = 4
    peak_prominence: float = 0.1  # fraction of the spectral maximum


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    sample: SampleConfig = dataclasses.field(default_factory=SampleConfig)
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    drive: DriveConfig = dataclasses.field(default_factory=DriveConfig)
    readout: ReadoutBlock = dataclasses.field(default_factory=ReadoutBlock)
    run: RunConfig = dataclasses.field(default_factory=RunConfig)

    # --- serialization

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        errors = []
        data = dict(data or {})
        blocks = {}
        for f in dataclasses.fields(cls):
            if f.name == "schema_version":
                continue
            sub_cls = type(f.default_factory())
            raw = data.pop(f.name, None) or {}
            if not isinstance(raw, dict):
                errors.append((f.name, "must be a mapping"))
                continue
            known = {g.name for g in dataclasses.fields(sub_cls)}
            for key in sorted(set(raw) - known):
                errors.append((f"{f.name}.{key}", "unknown field"))
            blocks[f.name] = sub_cls(**{k: v for k, v in raw.items() if k in known})
        version = data.pop("schema_version", SCHEMA_VERSION)
        for key in sorted(data):
            errors.append((key, "unknown field"))
        if version != SCHEMA_VERSION:
            errors.append(("schema_version", f"unsupported version {version!r} (expected {SCHEMA_VERSION})"))
        if errors:
            raise ConfigError(errors)
        return cls(schema_version=version, **blocks)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError([("<file>", f"not valid YAML: {exc}")]) from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError([("<file>", "top level must be a mapping")])
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    # --- physics objects

    @property
    def epsilon(self) -> float:
        return MAGIC_ANGLE if self.field.epsilon is None else float(self.field.epsilon)

    @property
    def x(self) -> float:
        if self.sample.x is not None:
            return float(self.sample.x)
        return thermal_x(self.field.B0, self.sample.temperature)

    def field_program(self) -> FieldProgram:
        return FieldProgram(self.field.B0, self.field.nu, self.epsilon, self.field.mode)

    def drive_program(self) -> DriveProgram:
        d = self.drive
        return DriveProgram(
            omega=d.omega, p=int(d.p), alpha=d.alpha, geometry_variant=d.geometry_variant,
            phi_error=math.radians(d.phi_error_deg),
            misalignment_azimuth=math.radians(d.misalignment_azimuth_deg),
            misalignment_model=d.misalignment_model, fslg=d.fslg,
            nutations_per_interval=d.nutations_per_interval,
            geometric_compensation=d.geometric_compensation,
        )

    def iso_shifts(self) -> list[float]:
        return [float(np.mean(v)) for v in self.sample.group_principal_values]

    def replace(self, path: str, value) -> "ExperimentConfig":
        """Copy with one dotted field (e.g. 'drive.phi_error_deg') replaced."""
        block, key = path.split(".")
        sub = dataclasses.replace(getattr(self, block), **{key: value})
        return dataclasses.replace(self, **{block: sub})


def _positive(errors, path, value):
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
        errors.append((path, f"must be positive, got {value!r}"))
        return False
    return True


def _choice(errors, path, value, options):
    if value not in options:
        errors.append((path, f"must be one of {list(options)}, got {value!r}"))
        return False
    return True


def validate(config: ExperimentConfig) -> ExperimentConfig:
    """Check physical and numerical consistency; return the resolved config or raise ConfigError."""
    from .spectra import predict_lines

    e: list = []
    s, f, d, r, run = config.sample, config.field, config.drive, config.readout, config.run
    gv = s.group_principal_values
    if not isinstance(gv, (list, tuple)) or len(gv) == 0:
        e.append(("sample.group_principal_values", "sample is empty: need at least one group"))
    else:
        for i, vals in enumerate(gv):
            if not isinstance(vals, (list, tuple)) or len(vals) != 3:
                e.append((f"sample.group_principal_values[{i}]", "need three principal values"))
    if not isinstance(s.pair_count, int) or isinstance(s.pair_count, bool) or s.pair_count < 1:
        e.append(("sample.pair_count", f"sample is empty: need at least one pair, got {s.pair_count!r}"))
    for name in ("internuclear_distance", "nv_depth", "temperature"):
        _positive(e, f"sample.{name}", getattr(s, name))
    if not isinstance(s.exclusion_radius, (int, float)) or s.exclusion_radius < 0:
        e.append(("sample.exclusion_radius", "must be non-negative"))
    if s.x is not None and (not isinstance(s.x, (int, float)) or s.x < 0):
        e.append(("sample.x", "must be non-negative"))
    _positive(e, "field.B0", f.B0)
    nu_ok = _positive(e, "field.nu", f.nu)
    _choice(e, "field.mode", f.mode, FIELD_MODES)
    if f.epsilon is not None and not 0 < f.epsilon < math.pi:
        e.append(("field.epsilon", "must lie in (0, pi)"))
    drive_ok = _positive(e, "drive.omega", d.omega)
    if not isinstance(d.p, int) or isinstance(d.p, bool) or d.p < 1:
        e.append(("drive.p", f"must be a positive integer, got {d.p!r}"))
        drive_ok = False
    _choice(e, "drive.geometry_variant", d.geometry_variant, DRIVE_VARIANTS)
    _choice(e, "drive.misalignment_model", d.misalignment_model, MISALIGNMENT_MODELS)
    if not isinstance(d.noise_sigma, (int, float)) or d.noise_sigma < 0:
        e.append(("drive.noise_sigma", "must be non-negative"))
    _positive(e, "drive.noise_tau", d.noise_tau)
    _positive(e, "drive.noise_dt", d.noise_dt)
    _positive(e, "drive.nutations_per_interval", d.nutations_per_interval)
    _choice(e, "readout.dd_sequence", r.dd_sequence, DD_PATTERNS)
    _choice(e, "readout.carrier_choice", r.carrier_choice, CARRIERS)
    _positive(e, "readout.T1", r.T1)
    for name, low in (("windows", 16), ("sensors", 1), ("shots", 1)):
        val = getattr(r, name)
        if not isinstance(val, int) or isinstance(val, bool) or val < low:
            e.append((f"readout.{name}", f"must be an integer >= {low}, got {val!r}"))
    if not isinstance(r.readout_noise, (int, float)) or r.readout_noise < 0:
        e.append(("readout.readout_noise", "must be non-negative"))
    _choice(e, "run.propagation_mode", run.propagation_mode, MODES)
    if not isinstance(run.oversample, (int, float)) or run.oversample < MIN_OVERSAMPLE:
        e.append(("run.oversample", f"must be at least {MIN_OVERSAMPLE}"))
    _choice(e, "run.spectrum_window", run.spectrum_window, WINDOWS)
    if not isinstance(run.zero_pad, int) or run.zero_pad < 1:
        e.append(("run.zero_pad", "must be a positive integer"))
    if not 0 < run.peak_prominence < 1:
        e.append(("run.peak_prominence", "must lie in (0, 1)"))
    if not isinstance(run.seed, int) or isinstance(run.seed, bool) or run.seed < 0:
        e.append(("run.seed", "must be a non-negative integer"))
    if e:
        raise ConfigError(e)

    # cross-field physics checks
    drive = config.drive_program()
    if nu_ok and drive_ok:
        pred = predict_lines(config.iso_shifts(), drive)
        nyquist = f.nu / 2
        for i, line in enumerate(pred.lines):
            if abs(line) >= nyquist:
                e.append((f"sample.group_principal_values[{i}]",
                          f"predicted line {line:.1f} Hz is above the Nyquist limit {nyquist:.1f} Hz"))
        if drive.Omega_eff < 4 * f.nu:
            e.append(("drive.p", f"effective Rabi frequency {drive.Omega_eff:.3g} Hz is too close to nu"))
    if run.propagation_mode != "ip_rwa_bs" and not e:
        steps = _step_count(config, drive)
        if steps > LAB_STEP_BUDGET:
            e.append(("run.propagation_mode",
                      f"{run.propagation_mode} needs {steps:.3g} steps for {r.windows} windows "
                      f"(budget {LAB_STEP_BUDGET:.3g}); use ip_rwa_bs or scale drive.omega down"))
    if e:
        raise ConfigError(e)
    return dataclasses.replace(
        config,
        sample=dataclasses.replace(s, x=config.x),
        field=dataclasses.replace(f, epsilon=config.epsilon),
    )


def _step_count(config: ExperimentConfig, drive: DriveProgram) -> int:
    tensors = [ShiftTensor(tuple(v)) for v in config.sample.group_principal_values]
    batch = ClusterBatch.from_tensors(tensors)
    programs = Programs(config.field_program(), drive)
    grid = step_grid(batch, programs, config.run.propagation_mode, config.run.oversample)
    return grid.steps_per_window * config.readout.windows
