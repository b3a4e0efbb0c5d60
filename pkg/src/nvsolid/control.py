"""Control programs: rotating field, MAS-frame axes, fsLG drive, misalignment and amplitude noise.

Coordinates: the laboratory axes are chosen so that the field points along z
at every interrogation window.  The cone frame (u, v, n) is then
u = x, v = cos(eps) y - sin(eps) z, n = sin(eps) y + cos(eps) z, and the
field rotates about n at the rate nu.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.spatial.transform import Rotation

from .constants import MAGIC_ANGLE

FIELD_MODES = ("rotating_field", "static_field", "rotating_sample")
DRIVE_VARIANTS = ("modulated", "simple")
MISALIGNMENT_MODELS = ("rigid", "literal")


def cone_axes(epsilon: float) -> np.ndarray:
    """Rows u, v, n of the cone frame in laboratory coordinates."""
    c, s = np.cos(epsilon), np.sin(epsilon)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_about(axis, angle) -> np.ndarray:
    """Rotation matrices (..., 3, 3) by `angle` about the unit vector `axis`."""
    angle = np.asarray(angle, dtype=float)
    vec = np.multiply.outer(angle, np.asarray(axis, dtype=float))
    mats = Rotation.from_rotvec(vec.reshape(-1, 3)).as_matrix()
    return mats.reshape(angle.shape + (3, 3))


@dataclass(frozen=True)
class FieldProgram:
    B0: float = 2.0
    nu: float = 1e3
    epsilon: float = MAGIC_ANGLE
    mode: str = "rotating_field"

    def __post_init__(self):
        if self.mode not in FIELD_MODES:
            raise ValueError(f"unknown field mode {self.mode!r}")

    @property
    def axes(self) -> np.ndarray:
        return cone_axes(self.epsilon)

    @property
    def n_hat(self) -> np.ndarray:
        return self.axes[2]

    def field_phase(self, t):
        """Rotation angle of the field about n (zero unless the field rotates)."""
        t = np.asarray(t, dtype=float)
        if self.mode == "rotating_field":
            return 2 * np.pi * self.nu * t
        return np.zeros_like(t)

    def sample_phase(self, t):
        """Rotation angle of the sample about n; the sample turns opposite to the field."""
        t = np.asarray(t, dtype=float)
        if self.mode == "rotating_sample":
            return -2 * np.pi * self.nu * t
        return np.zeros_like(t)

    def sample_rotation(self, t) -> np.ndarray:
        return rotation_about(self.n_hat, self.sample_phase(t))


def field_direction(program: FieldProgram, t) -> np.ndarray:
    u, v, n = program.axes
    ph = np.asarray(program.field_phase(t))[..., None]
    s, c = np.sin(program.epsilon), np.cos(program.epsilon)
    return s * np.sin(ph) * u - s * np.cos(ph) * v + c * n


def field_at(program: FieldProgram, t) -> np.ndarray:
    """B0 [sin(eps) sin(2 pi nu t) u - sin(eps) cos(2 pi nu t) v + cos(eps) n] in tesla."""
    return program.B0 * field_direction(program, t)


def mas_axes(program: FieldProgram, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit vectors (M, A, S): S along the field, (M, A, S) right-handed."""
    u, v, n = program.axes
    ph = np.asarray(program.field_phase(t))[..., None]
    s, c = np.sin(program.epsilon), np.cos(program.epsilon)
    w = np.sin(ph) * u - np.cos(ph) * v
    M = np.cos(ph) * u + np.sin(ph) * v
    A = -c * w + s * n
    S = s * w + c * n
    return M, A, S


# --- amplitude noise --------------------------------------------------------------


@dataclass(frozen=True)
class NoiseProcess:
    relative_sigma: float = 0.0025
    correlation_time: float = 1e-3
    seed: int = 0
    dt: float = 1e-5


def ou_step(x: float, dt: float, tau_c: float, sigma: float, rng: np.random.Generator) -> float:
    """Exact AR(1) update of a stationary Ornstein-Uhlenbeck process."""
    if dt <= 0 or tau_c <= 0:
        raise ValueError("dt and tau_c must be positive")
    a = np.exp(-dt / tau_c)
    return x * a + sigma * np.sqrt(-np.expm1(-2 * dt / tau_c)) * rng.standard_normal()


def ou_path(
    n: int, dt: float, tau_c: float, sigma: float, rng: np.random.Generator, x0: float | None = None
) -> np.ndarray:
    """n successive OU samples; x0 defaults to a draw from the stationary law."""
    if dt <= 0 or tau_c <= 0:
        raise ValueError("dt and tau_c must be positive")
    if x0 is None:
        x0 = sigma * rng.standard_normal()
    a = np.exp(-dt / tau_c)
    kicks = sigma * np.sqrt(-np.expm1(-2 * dt / tau_c)) * rng.standard_normal(n)
    out, _ = lfilter([1.0], [1.0, -a], kicks, zi=[a * x0])
    return out


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Piecewise-constant realization of the relative amplitude error."""

    dt: float
    values: np.ndarray

    @classmethod
    def silent(cls) -> "NoisePath":
        return cls(1.0, np.zeros(1))

    @classmethod
    def generate(cls, process: NoiseProcess, duration: float, rng: np.random.Generator) -> "NoisePath":
        n = int(np.ceil(duration / process.dt)) + 1
        if process.relative_sigma == 0:
            return cls(process.dt, np.zeros(n))
        vals = ou_path(n, process.dt, process.correlation_time, process.relative_sigma, rng)
        return cls(process.dt, vals)

    @property
    def is_silent(self) -> bool:
        return not np.any(self.values)

    def value_at(self, t):
        idx = np.floor(np.asarray(t, dtype=float) / self.dt + 1e-9).astype(int)
        return self.values[np.clip(idx, 0, len(self.values) - 1)]


# --- drive -------------------------------------------------------------------------


@dataclass(frozen=True)
class DriveProgram:
    omega: float = 84e6
    p: int = 448
    alpha: float = np.pi / 2
    geometry_variant: str = "modulated"
    phi_error: float = 0.0
    misalignment_azimuth: float = 0.0
    misalignment_model: str = "rigid"
    fslg: bool = True
    nutations_per_interval: float = 1.0
    geometric_compensation: bool = True

    def __post_init__(self):
        if self.geometry_variant not in DRIVE_VARIANTS:
            raise ValueError(f"unknown drive variant {self.geometry_variant!r}")
        if self.misalignment_model not in MISALIGNMENT_MODELS:
            raise ValueError(f"unknown misalignment model {self.misalignment_model!r}")
        if self.p < 1:
            raise ValueError("p must be a positive integer")

    @property
    def Omega(self) -> float:
        """Nominal transverse amplitude, tied to the carrier by Omega p = sqrt(2/3) omega."""
        return np.sqrt(2.0 / 3.0) * self.omega / self.p

    @property
    def Delta(self) -> float:
        return self.Omega / np.sqrt(2.0)

    @property
    def Omega_eff(self) -> float:
        return float(np.hypot(self.Omega, self.Delta))

    @property
    def bloch_siegert(self) -> float:
        return self.Omega**2 / (4 * self.omega)


@dataclass(frozen=True)
class FslgSchedule:
    """Sign pattern of the detuning and drive amplitude, commensurate with each window."""

    nu: float
    intervals_per_window: int
    enabled: bool = True

    @classmethod
    def build(cls, drive: DriveProgram, fieldprog: FieldProgram) -> "FslgSchedule":
        ratio = drive.Omega_eff / (fieldprog.nu * drive.nutations_per_interval)
        n = max(2, 2 * int(round(ratio / 2)))
        return cls(fieldprog.nu, n, drive.fslg)

    @property
    def interval(self) -> float:
        return 1.0 / (self.nu * self.intervals_per_window)

    @property
    def cycles_per_window(self) -> int:
        return self.intervals_per_window // 2

    def sign(self, t):
        t = np.asarray(t, dtype=float)
        if not self.enabled:
            return np.ones_like(t)
        k = np.floor(t / self.interval + 1e-9).astype(np.int64)
        return np.where(k % 2 == 0, 1.0, -1.0)

    def signed_time(self, t):
        """Integral of the sign from 0 to t."""
        t = np.asarray(t, dtype=float)
        if not self.enabled:
            return t.copy()
        period = 2 * self.interval
        r = np.mod(t, period)
        return np.where(r < self.interval, r, period - r)


def larmor_frequency(drive: DriveProgram, fieldprog: FieldProgram) -> float:
    """Larmor frequency implied by the carrier, including the geometric offset when compensated."""
    f = drive.omega + drive.Delta
    if fieldprog.mode == "rotating_field" and drive.geometric_compensation:
        f += fieldprog.nu * np.cos(fieldprog.epsilon)
    return f


def carrier_phase(drive: DriveProgram, schedule: FslgSchedule, t):
    """2 pi * integral of the carrier frequency omega + Delta (1 - s(t'))."""
    t = np.asarray(t, dtype=float)
    return 2 * np.pi * (drive.omega * t + drive.Delta * (t - schedule.signed_time(t)))


def ideal_direction(drive: DriveProgram, fieldprog: FieldProgram, t) -> np.ndarray:
    """Unperturbed drive axis: M(t) for the modulated drive, n for the simple one."""
    if drive.geometry_variant == "simple" and fieldprog.mode != "rotating_sample":
        return np.broadcast_to(fieldprog.n_hat, np.shape(t) + (3,)).copy()
    M, _, _ = mas_axes(fieldprog, t)
    return M


def drive_direction(drive: DriveProgram, fieldprog: FieldProgram, t) -> np.ndarray:
    """Realized drive axis with the misalignment folded in (not normalized for 'literal')."""
    t = np.asarray(t, dtype=float)
    u, v, n = fieldprog.axes
    phi, eta = drive.phi_error, drive.misalignment_azimuth
    ideal = ideal_direction(drive, fieldprog, t)
    if drive.geometry_variant == "simple" and fieldprog.mode != "rotating_sample":
        perp = np.cos(eta) * u + np.sin(eta) * v
        return np.cos(phi) * ideal + np.sin(phi) * perp
    if drive.misalignment_model == "literal":
        ph = np.asarray(fieldprog.field_phase(t))[..., None]
        coeffs = np.cos(phi) * np.array([1.0, 1.0, 0.0]) + np.sin(phi) * (
            np.cos(eta) * np.array([1.0, -1.0, 0.0]) / np.sqrt(2) + np.sin(eta) * np.array([0.0, 0.0, 1.0])
        )
        return coeffs[0] * np.sin(ph) * u + coeffs[1] * np.cos(ph) * v + coeffs[2] * n
    perp = np.cos(eta) * np.cross(n, ideal) + np.sin(eta) * n
    return np.cos(phi) * ideal + np.sin(phi) * perp


def drive_scale(drive: DriveProgram, fieldprog: FieldProgram) -> float:
    """Amplitude factor giving the simple (axis-n) drive the same transverse strength."""
    if drive.geometry_variant == "simple" and fieldprog.mode != "rotating_sample":
        return 1.0 / np.sin(fieldprog.epsilon)
    return 1.0


def drive_phase_offset(drive: DriveProgram, fieldprog: FieldProgram) -> float:
    """Phase offset entering cos(carrier + offset); the simple drive lags by pi/2."""
    if drive.geometry_variant == "simple" and fieldprog.mode != "rotating_sample":
        return drive.alpha - np.pi / 2
    return drive.alpha


@dataclass(frozen=True, eq=False)
class DriveSample:
    direction: np.ndarray
    amplitude: np.ndarray
    carrier_phase: np.ndarray
    delta_sign: np.ndarray


def drive_at(
    drive: DriveProgram, fieldprog: FieldProgram, t, noise: NoisePath | None = None,
    schedule: FslgSchedule | None = None,
) -> DriveSample:
    """Direction, lab amplitude 2 Omega (1 + noise), carrier phase and fsLG sign at time t.

    The fsLG sign multiplies both the detuning and the drive amplitude.
    """
    schedule = schedule or FslgSchedule.build(drive, fieldprog)
    t = np.asarray(t, dtype=float)
    x = 0.0 if noise is None else noise.value_at(t)
    amp = 2 * drive.Omega * drive_scale(drive, fieldprog) * (1.0 + x)
    return DriveSample(
        direction=drive_direction(drive, fieldprog, t),
        amplitude=np.broadcast_to(amp, t.shape).astype(float),
        carrier_phase=carrier_phase(drive, schedule, t),
        delta_sign=schedule.sign(t),
    )
