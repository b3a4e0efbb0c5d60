"""NV readout: effective nuclear field, dynamical-decoupling phase and the
electron + nitrogen correlation sequence, plus the closed-form ensemble signal.

Phases are in radians; the electron and nitrogen are treated as spin-1/2
two-level systems with instantaneous, ideal microwave/RF gates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import spinalg
from .constants import GAMMA_ELECTRON, GAMMA_N15
from .control import DriveProgram
from .sample import DetectionGeometry, coupling_prefactor, mean_sin2_theta

DD_PATTERNS = {"XY4": "XYXY", "XY8": "XYXYYXYX"}
CARRIERS = ("omega_tilde", "omega")


class ReadoutError(ValueError):
    """Inconsistent readout inputs (mismatched nuclei, empty ensembles)."""


@dataclass(frozen=True)
class ReadoutConfig:
    """Sensor-side settings.

    `carrier` is the filter frequency in Hz; when None it is derived from the
    drive via `carrier_choice` ("omega_tilde" = sqrt(2) Omega, or "omega" = Omega).
    `t_prob` defaults to one full pass of the pulse pattern.
    """

    gamma_e: float = GAMMA_ELECTRON
    gamma_n: float = GAMMA_N15
    dd_sequence: str = "XY8"
    carrier_choice: str = "omega_tilde"
    carrier: float | None = None
    spacing: float | None = None
    t_prob: float | None = None
    T1_memory: float = 1.0
    windows: int = 512
    readout_noise: float = 0.0

    def __post_init__(self):
        if self.dd_sequence not in DD_PATTERNS:
            raise ValueError(f"unknown dd_sequence {self.dd_sequence!r}")
        if self.carrier_choice not in CARRIERS:
            raise ValueError(f"unknown carrier_choice {self.carrier_choice!r}")
        if self.T1_memory <= 0:
            raise ValueError("T1_memory must be positive")

    def resolve(self, drive: DriveProgram) -> "ReadoutConfig":
        """Fill carrier, spacing and t_prob from the drive."""
        carrier = self.carrier
        if carrier is None:
            carrier = np.sqrt(2.0) * drive.Omega if self.carrier_choice == "omega_tilde" else drive.Omega
        spacing = self.spacing if self.spacing is not None else 1.0 / (2.0 * carrier)
        t_prob = self.t_prob if self.t_prob is not None else len(DD_PATTERNS[self.dd_sequence]) * spacing
        n = t_prob / spacing
        if abs(n - round(n)) > 1e-6 or round(n) < 1:
            raise ValueError(f"t_prob is {n:.4f} interpulse spacings; must be a positive integer")
        return ReadoutConfig(self.gamma_e, self.gamma_n, self.dd_sequence, self.carrier_choice,
                             float(carrier), float(spacing), float(t_prob), self.T1_memory,
                             self.windows, self.readout_noise)

    @property
    def n_pulses(self) -> int:
        return int(round(self.t_prob / self.spacing))

    @property
    def phase_per_tesla(self) -> float:
        """kappa: radians of sensor phase per tesla of resonant quadrature amplitude."""
        return 2 * np.pi * self.gamma_e * 2 * self.t_prob / np.pi


def _resolved(config: ReadoutConfig) -> ReadoutConfig:
    if config.carrier is None or config.spacing is None or config.t_prob is None:
        raise ReadoutError("ReadoutConfig must be resolved against a drive first")
    return config


@dataclass(frozen=True, eq=False)
class SensorRecord:
    index: int
    amplitude: np.ndarray  # A_j per window, radians
    initial_phase: float  # xi_j, radians
    phi: np.ndarray  # accumulated phase per window
    correlation: np.ndarray  # <S_z> per window


# --- effective field -----------------------------------------------------------------------


def effective_field(I_u, I_v, weights, t, carrier: float):
    """B_N(t) = sum_k C_k [cos(2 pi f t) <I_v^k> + sin(2 pi f t) <I_u^k>] in tesla.

    I_u, I_v and weights share their last axis (the nuclei); t may be an array,
    in which case it is prepended to the output shape.
    """
    I_u, I_v, w = (np.asarray(a, dtype=float) for a in (I_u, I_v, weights))
    if I_u.shape[-1] != w.shape[-1] or I_v.shape[-1] != w.shape[-1]:
        raise ReadoutError(
            f"nucleus count mismatch: {I_u.shape[-1]}/{I_v.shape[-1]} expectations, {w.shape[-1]} weights"
        )
    bv = I_v @ w
    bu = I_u @ w
    ph = 2 * np.pi * carrier * np.asarray(t, dtype=float)
    ph = ph.reshape(ph.shape + (1,) * np.ndim(bu))
    return np.cos(ph) * bv + np.sin(ph) * bu


def geometry_field(traces, geometry: DetectionGeometry, t, carrier: float):
    """B_N(t) from window traces of the pairs in `geometry` (two nuclei each)."""
    I_u = np.concatenate([tr.I_u for tr in traces])
    I_v = np.concatenate([tr.I_v for tr in traces])
    return effective_field(I_u, I_v, geometry.coupling_weights, t, carrier)


# --- dynamical decoupling ------------------------------------------------------------------------


def pulse_times(config: ReadoutConfig, start: float = 0.0) -> np.ndarray:
    """Centres of the pi pulses: start + (k - 1/2) spacing, k = 1..n."""
    config = _resolved(config)
    return start + (np.arange(config.n_pulses) + 0.5) * config.spacing


def probe_start(config: ReadoutConfig) -> float:
    """Sequence start a quarter carrier period in, so the filter picks the sin quadrature."""
    return 0.25 / _resolved(config).carrier


def dd_phase(amplitude, quadrature, config: ReadoutConfig):
    """Phase for B_N(t) = b cos(2 pi f t - psi): kappa * b * sin(psi).

    `amplitude` may be an array; the result is linear in it.
    """
    config = _resolved(config)
    return config.phase_per_tesla * np.asarray(amplitude) * np.sin(quadrature)


def dd_phase_from_field(field, config: ReadoutConfig, samples_per_spacing: int = 400,
                        detuning_tolerance: float = 0.01) -> float:
    """Filter-function integral 2 pi gamma_e int y(t) B(t) dt for a callable field B(t)."""
    config = _resolved(config)
    resonant = 1.0 / (2.0 * config.spacing)
    if abs(resonant / config.carrier - 1.0) > detuning_tolerance:
        warnings.warn(f"interpulse spacing is off resonance by {resonant / config.carrier - 1:.2%}")
    t0 = probe_start(config)
    n = config.n_pulses * samples_per_spacing
    h = config.t_prob / n
    t = t0 + (np.arange(n) + 0.5) * h
    k = np.searchsorted(pulse_times(config, t0), t)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    return float(2 * np.pi * config.gamma_e * np.sum(sign * field(t)) * h)


def simulate_dd(field, config: ReadoutConfig, steps_per_spacing: int = 400) -> float:
    """Brute-force sensor phase: step a test spin under B(t) with instantaneous pi pulses.

    Starts from the state left by a (pi/2)_x pulse and reads the phase from the
    final transverse components.
    """
    config = _resolved(config)
    Sx, Sy, Sz = (spinalg.site_matrix(a, 0, 1) for a in "xyz")
    gates = {"X": spinalg.propagator(Sx, np.pi), "Y": spinalg.propagator(Sy, np.pi)}
    pattern = DD_PATTERNS[config.dd_sequence]
    psi = spinalg.propagator(Sx, np.pi / 2) @ np.array([1.0, 0.0], dtype=complex)
    t0 = probe_start(config)
    h = config.spacing / steps_per_spacing
    edges = [0.5] + [1.0] * (config.n_pulses - 1) + [0.5]
    t = t0
    for seg, frac in enumerate(edges):
        m = int(round(frac * steps_per_spacing))
        mids = t + (np.arange(m) + 0.5) * h
        angles = 2 * np.pi * config.gamma_e * field(mids) * h
        psi = np.exp(-1j * np.sum(angles) * np.diag(Sz)) * psi
        t += m * h
        if seg < config.n_pulses:
            psi = gates[pattern[seg % len(pattern)]] @ psi
    sx = np.real(psi.conj() @ Sx @ psi)
    sy = np.real(psi.conj() @ Sy @ psi)
    # the pulse train reverses the transverse vector when the pulse count is odd per axis
    if config.n_pulses % 4 == 2:
        sx, sy = -sx, -sy
    return float(np.arctan2(sx, -sy))


# --- correlation sequence --------------------------------------------------------------------------

_E = [spinalg.site_matrix(a, 0, 2) for a in "xyz"]  # electron
_N = [spinalg.site_matrix(a, 1, 2) for a in "xyz"]  # nitrogen memory
_P1 = np.diag([0.0, 1.0]).astype(complex)
_ID2 = np.eye(2, dtype=complex)
_X2 = np.array([[0, 1], [1, 0]], dtype=complex)
# controlled NOTs conditioned on the lower level of the control spin
CNOT_E_TO_N = np.kron(np.diag([1.0, 0.0]), _ID2) + np.kron(_P1, _X2)
CNOT_N_TO_E = np.kron(_ID2, np.diag([1.0, 0.0])) + np.kron(_X2, _P1)


def _rot(op, angle):
    return spinalg.propagator(op, angle)


def _apply(U, rho):
    return U @ rho @ np.swapaxes(U.conj(), -1, -2)


def _phase_gates(phi):
    """exp(-i phi S_z) for an array of phases, as (..., 4, 4) diagonal matrices."""
    phi = np.asarray(phi, dtype=float)
    d = np.diag(_E[2]).real
    return np.einsum("...i,ij->...ij", np.exp(-1j * phi[..., None] * d), np.eye(4))


def _reinit_electron(rho):
    """Reset the electron to its upper level, keeping the memory's reduced state."""
    r = rho.reshape(rho.shape[:-2] + (2, 2, 2, 2))
    mem = np.einsum("...aiaj->...ij", r)
    up = np.diag([1.0, 0.0]).astype(complex)
    return np.einsum("ab,...ij->...aibj", up, mem).reshape(rho.shape)


def _depolarize_memory(rho, damping):
    """Shrink the memory Bloch vector by `damping`."""
    damping = np.asarray(damping, dtype=float)[..., None, None]
    r = rho.reshape(rho.shape[:-2] + (2, 2, 2, 2))
    elec = np.einsum("...iaja->...ij", r)
    mixed = np.einsum("...ab,ij->...aibj", elec, _ID2 / 2).reshape(rho.shape)
    return damping * rho + (1 - damping) * mixed


def store_phase(phi_0):
    """First stage: probe once and write the phase into the memory populations."""
    phi_0 = np.asarray(phi_0, dtype=float)
    rho = np.kron(np.diag([1.0, 0.0]), np.diag([1.0, 0.0])).astype(complex)
    rho = np.broadcast_to(rho, phi_0.shape + (4, 4))
    rho = _apply(_rot(_E[0], np.pi / 2), rho)
    rho = _apply(_phase_gates(phi_0), rho)
    rho = _apply(_rot(_E[1], -np.pi / 2), rho)
    rho = _apply(CNOT_E_TO_N, rho)
    return _reinit_electron(rho)


def correlate(rho_stored, phi_p, damping):
    """Second stage: probe again, map the memory back onto the electron and return <S_z>."""
    rho = _depolarize_memory(rho_stored, damping)
    rho = _apply(_rot(_E[0], np.pi / 2), rho)
    rho = _apply(_phase_gates(phi_p), rho)
    # mapped back about -y like the storing pulse; an x-axis pulse here would
    # read out the cos quadrature of the second phase instead of its sine
    rho = _apply(_rot(_E[1], -np.pi / 2), rho)
    rho = _apply(CNOT_N_TO_E, rho)
    return np.real(np.einsum("...ij,ji->...", rho, _E[2]))


def correlation_sequence(phi_0: float, phi_p: float, damping: float = 1.0) -> float:
    """Gate-level <S_z> of one correlation measurement (dense 4x4 density matrices)."""
    rho = spinalg.DensityState(store_phase(phi_0))
    return float(correlate(rho.matrix, phi_p, damping))


def _second_stage_coefficients(rho_stored):
    """Fourier coefficients of the second stage in the probe phase.

    The probe phase enters only through a diagonal gate, so for a fixed stored
    state <S_z>(phi) = Re[c0 + c1 exp(-i phi) + c_1 exp(i phi)].  Returns
    (c0, c1, c_1) for the undamped and for the fully depolarized memory.
    """
    R = _rot(_E[0], np.pi / 2)
    U2 = CNOT_N_TO_E @ _rot(_E[1], -np.pi / 2)
    O = U2.conj().T @ _E[2] @ U2
    d = np.diag(_E[2]).real
    diff = np.rint(d[:, None] - d[None, :]).astype(int)
    out = []
    for rho in (rho_stored, _depolarize_memory(rho_stored, 0.0)):
        M = _apply(R, rho) * O.T
        out.append(tuple(M[..., diff == k].sum(axis=-1) for k in (0, 1, -1)))
    return out


def correlation_batch(phi_0, phi, damping, chunk: int = 4096) -> np.ndarray:
    """Gate-level correlation for sensors x windows.

    phi_0 has shape (S,), phi (S, W) and damping (W,).  The stored state is
    computed once per sensor and the second stage is evaluated through its exact
    dependence on the probe phase and the memory damping.
    """
    phi_0 = np.asarray(phi_0, dtype=float)
    phi = np.asarray(phi, dtype=float)
    S, W = phi.shape
    damping = np.broadcast_to(np.asarray(damping, dtype=float), (W,))
    out = np.empty((S, W))
    for lo in range(0, S, chunk):
        sl = slice(lo, lo + chunk)
        kept, mixed = _second_stage_coefficients(store_phase(phi_0[sl]))
        e = np.exp(-1j * phi[sl])
        vals = []
        for c0, c1, cm1 in (kept, mixed):
            vals.append(np.real(c0[:, None] + c1[:, None] * e + cm1[:, None] * e.conj()))
        out[sl] = damping * vals[0] + (1 - damping) * vals[1]
    return out


def memory_damping(p, nu: float, T1: float):
    return np.exp(-np.asarray(p, dtype=float) / (nu * T1))


# --- ensemble ------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnsembleSignal:
    mean: np.ndarray
    stderr: np.ndarray
    count: int


def ensemble_average(records) -> EnsembleSignal:
    """Mean and standard error of the correlation over records (sensors x shots)."""
    if isinstance(records, np.ndarray):
        data = np.atleast_2d(records)
    else:
        records = list(records)
        if not records:
            raise ReadoutError("cannot average an empty set of records")
        data = np.array([r.correlation for r in records])
    if data.shape[0] == 0:
        raise ReadoutError("cannot average an empty set of records")
    n = data.shape[0]
    mean = data.mean(axis=0)
    stderr = data.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return EnsembleSignal(mean, stderr, n)


def sensor_quadratures(I_u, I_v, weights) -> np.ndarray:
    """Complex quadrature amplitude sum_k C_k (<I_u^k> + i <I_v^k>) per (sensor, window).

    I_u, I_v have shape (W, S, K) and weights (S, K); the result is (S, W).
    """
    return np.einsum("wsk,sk->sw", np.asarray(I_u) + 1j * np.asarray(I_v), weights)


def records_from_quadratures(z, config: ReadoutConfig, nu: float, rng=None) -> list[SensorRecord]:
    """Run the correlation sequence for every sensor; z has shape (S, W + 1).

    The filter picks the I_u quadrature, so phi = kappa Re z.
    """
    config = _resolved(config)
    phi = config.phase_per_tesla * z.real
    p = np.arange(z.shape[1])
    corr = correlation_batch(phi[:, 0], phi, memory_damping(p, nu, config.T1_memory))
    if config.readout_noise > 0:
        if rng is None:
            raise ReadoutError("readout noise requested without a random generator")
        corr = corr + rng.normal(scale=config.readout_noise, size=corr.shape)
    amp = config.phase_per_tesla * np.abs(z)
    xi = np.angle(z[:, 0])
    return [SensorRecord(j, amp[j], float(xi[j]), phi[j], corr[j]) for j in range(z.shape[0])]


# --- closed form ---------------------------------------------------------------------------------


def signal_prefactor(config: ReadoutConfig, geometry: DetectionGeometry | None = None, *,
                     F2: float | None = None, volume: float | None = None,
                     gamma: float | None = None, x: float = 0.0) -> float:
    """g: amplitude of the ensemble correlation per nucleus.

    g = (1/2) (kappa g_c)^2 (F2 / V) / 3 * (3/2) E[sin^2 theta], with
    g_c = mu0 h gamma sqrt(2/3) / (8 pi) the per-spin coupling constant and
    F2 / V the density-weighted squared geometric factor.
    """
    config = _resolved(config)
    if geometry is not None:
        F2 = geometry.F2 if F2 is None else F2
        volume = geometry.volume if volume is None else volume
    if F2 is None or volume is None:
        raise ReadoutError("need a geometry or explicit F2 and volume")
    g_c = coupling_prefactor() / 2 if gamma is None else coupling_prefactor(gamma) / 2
    kappa = config.phase_per_tesla
    return 0.5 * (kappa * g_c) ** 2 * (F2 / volume) / 3 * 1.5 * mean_sin2_theta(x)


def analytic_signal(p, groups, drive: DriveProgram | None, config: ReadoutConfig,
                    geometry: DetectionGeometry | None = None, nu: float = 1e3,
                    damping: bool = True, **prefactor) -> np.ndarray:
    """g sum_i N_i cos(2 pi f_i p / nu) e^{-p/(nu T1)}, f_i = (delta_iso_i + Omega^2/4 omega)/sqrt(3).

    `groups` is a sequence of (count, delta_iso_hz) tuples.
    """
    p = np.asarray(p, dtype=float)
    bs = 0.0 if drive is None else drive.bloch_siegert
    g = signal_prefactor(config, geometry, **prefactor)
    total = np.zeros_like(p)
    for count, iso in groups:
        f = (iso + bs) / np.sqrt(3.0)
        total = total + count * np.cos(2 * np.pi * f * p / nu)
    if damping:
        total = total * memory_damping(p, nu, config.T1_memory)
    return g * total
