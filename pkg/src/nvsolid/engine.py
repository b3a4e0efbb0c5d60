"""Hamiltonian assembly, cluster propagation and average-Hamiltonian checks.

Three frames are supported:

* ``lab_exact``: every term in the laboratory, the carrier included.
* ``ip_full``: the exact interaction picture with respect to the carrier,
  counter-rotating and non-secular terms kept.
* ``ip_rwa_bs``: secular, rotating-wave terms only, with the Bloch-Siegert
  shift of the dropped counter-rotating drive added analytically.

Both interaction-picture frames are written in co-rotating coordinates in
which the field always points along z; these coincide with the laboratory
axes at every interrogation window.  Frequencies are handled in Hz and
multiplied by 2 pi only when an operator is formed.

The production path (``propagate_fast``) exploits that the ip_rwa_bs
Hamiltonian repeats every field period: propagators of each fsLG cycle are
built once, the amplitude noise (held constant over a cycle) enters through
a first-order generator per cycle, and states are then advanced cycle by
cycle for all windows.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from . import spinalg
from .control import (
    DriveProgram,
    FieldProgram,
    FslgSchedule,
    NoisePath,
    carrier_phase,
    drive_direction,
    drive_phase_offset,
    drive_scale,
    field_direction,
    larmor_frequency,
    rotation_about,
)
from .sample import PairCluster, ShiftTensor

MODES = ("lab_exact", "ip_full", "ip_rwa_bs")
MIN_OVERSAMPLE = 20
LAB_STEP_BUDGET = 50_000_000


class EngineError(RuntimeError):
    """Numerical failure during propagation (non-finite values, guard violations)."""


class ModeError(ValueError):
    """Mode and parameters are incompatible."""


# --- cluster batches -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClusterBatch:
    """Arrays describing P clusters of n_sites spins each (n_sites is 1 or 2)."""

    tensors: np.ndarray  # (P, n_sites, 3, 3) laboratory shift tensors, Hz
    unit_internuclear: np.ndarray  # (P, 3)
    dipolar_b: np.ndarray  # (P,) Hz
    iso: np.ndarray  # (P, n_sites) Hz

    @property
    def size(self) -> int:
        return self.tensors.shape[0]

    @property
    def n_sites(self) -> int:
        return self.tensors.shape[1]

    @property
    def dim(self) -> int:
        return 2**self.n_sites

    @classmethod
    def from_pairs(cls, pairs: list[PairCluster]) -> "ClusterBatch":
        return cls(
            tensors=np.array([[t.lab_tensor() for t in pr.tensors] for pr in pairs]),
            unit_internuclear=np.array([pr.unit_internuclear for pr in pairs]),
            dipolar_b=np.array([pr.dipolar_b for pr in pairs]),
            iso=np.array([[t.iso() for t in pr.tensors] for pr in pairs]),
        )

    @classmethod
    def from_tensors(cls, tensors: list[ShiftTensor]) -> "ClusterBatch":
        """Isolated single spins."""
        n = len(tensors)
        return cls(
            tensors=np.array([[t.lab_tensor()] for t in tensors]),
            unit_internuclear=np.tile([0.0, 0.0, 1.0], (n, 1)),
            dipolar_b=np.zeros(n),
            iso=np.array([[t.iso()] for t in tensors]),
        )

    def subset(self, idx) -> "ClusterBatch":
        return ClusterBatch(self.tensors[idx], self.unit_internuclear[idx], self.dipolar_b[idx], self.iso[idx])


@dataclass(frozen=True, eq=False)
class Programs:
    fieldprog: FieldProgram
    drive: DriveProgram
    noise: NoisePath | None = None
    drive_on: bool = True

    @property
    def schedule(self) -> FslgSchedule:
        return FslgSchedule.build(self.drive, self.fieldprog)

    @property
    def window(self) -> float:
        return 1.0 / self.fieldprog.nu

    @property
    def larmor(self) -> float:
        return larmor_frequency(self.drive, self.fieldprog)

    def frame_phase(self, t):
        """Phase of the interaction frame: the carrier, or the Larmor precession when undriven."""
        if self.drive_on:
            return carrier_phase(self.drive, self.schedule, t)
        return 2 * np.pi * self.larmor * np.asarray(t, dtype=float)

    def frame_frequency(self, t):
        if self.drive_on:
            s = self.schedule.sign(t)
            return self.drive.omega + self.drive.Delta * (1 - s)
        return np.full(np.shape(t), self.larmor)

    def noise_at(self, t):
        if self.noise is None:
            return np.zeros(np.shape(t))
        return self.noise.value_at(t)


# --- operators -------------------------------------------------------------------------


_BASIS_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def operator_basis(n_sites: int) -> tuple[np.ndarray, np.ndarray]:
    """Single-site operators (n_sites, 3, d, d) and the pair bilinears I1a I2b (3, 3, d, d)."""
    if n_sites not in _BASIS_CACHE:
        single = spinalg.spin_basis(n_sites)
        if n_sites >= 2:
            bil = np.einsum("aij,bjk->abik", single[0], single[1])
        else:
            bil = np.zeros((3, 3, 2, 2), dtype=complex)
        _BASIS_CACHE[n_sites] = (single, bil)
    return _BASIS_CACHE[n_sites]


def assemble(h: np.ndarray, D: np.ndarray, n_sites: int) -> np.ndarray:
    """2 pi [sum_k h_k . I^k + sum_ab D_ab I1a I2b] for coefficient stacks in Hz."""
    single, bil = operator_basis(n_sites)
    d = single.shape[-1]
    lead = h.shape[:-2]
    H = h.reshape(-1, n_sites * 3) @ single.reshape(n_sites * 3, d * d)
    if n_sites >= 2:
        H = H + D.reshape(-1, 9) @ bil.reshape(9, d * d)
    return (2 * np.pi * H).reshape(lead + (d, d))


def _rz(theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


# --- Hamiltonian coefficients ---------------------------------------------------------------


def coefficients(batch: ClusterBatch, programs: Programs, t, mode: str):
    """Coefficients (h, D) in Hz at times t for every cluster.

    h has shape (P, T, n_sites, 3) and multiplies the spin vectors; D has shape
    (P, T, 3, 3) and multiplies the bilinears I1a I2b.  See `assemble`.
    """
    if mode not in MODES:
        raise ModeError(f"unknown propagation mode {mode!r}")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    fp, dr = programs.fieldprog, programs.drive
    n = fp.n_hat
    ez = np.array([0.0, 0.0, 1.0])
    schedule = programs.schedule
    s = schedule.sign(t)
    x = programs.noise_at(t)
    amp = 2 * dr.Omega * drive_scale(dr, fp) * (1.0 + x) * s * float(programs.drive_on)
    offset = drive_phase_offset(dr, fp)
    d_lab = drive_direction(dr, fp, t)  # (T, 3)
    f_phase = fp.field_phase(t)
    s_phase = fp.sample_phase(t)

    if mode == "lab_exact":
        b_hat = field_direction(fp, t)  # (T, 3)
        R_s = rotation_about(n, s_phase)  # (T, 3, 3)
        sig = np.einsum("tij,pkjl,tml->ptkim", R_s, batch.tensors, R_s)
        r_hat = np.einsum("tij,pj->pti", R_s, batch.unit_internuclear)
        theta = carrier_phase(dr, schedule, t)
        drive_vec = (amp * np.cos(theta + offset))[:, None] * d_lab
        h = programs.larmor * b_hat[None, :, None, :] + np.einsum("ptkij,tj->ptki", sig, b_hat)
        h = h + drive_vec[None, :, None, :]
        D = batch.dipolar_b[:, None, None, None] * (
            3 * np.einsum("pti,ptj->ptij", r_hat, r_hat) - np.eye(3)
        )
        return h, D

    # co-rotating coordinates: the sample appears rotated by G = R_n(sample - field phase)
    G = rotation_about(n, s_phase - f_phase)  # (T, 3, 3)
    d_co = np.einsum("tji,tj->ti", rotation_about(n, f_phase), d_lab)  # R_n(-field)^T applied
    r_co = np.einsum("tij,pj->pti", G, batch.unit_internuclear)

    if mode == "ip_rwa_bs":
        b_eff = np.einsum("tji,j->ti", G, ez)  # G^T z
        a = np.einsum("pkij,ti,tj->ptk", batch.tensors, b_eff, b_eff)
        c, sn = np.cos(offset), np.sin(offset)
        half = 0.5 * amp
        cx = half * (d_co[:, 0] * c - d_co[:, 1] * sn)
        cy = half * (d_co[:, 0] * sn + d_co[:, 1] * c)
        beta = (cx**2 + cy**2) / (4 * dr.omega)
        z_common = s * dr.Delta * float(programs.drive_on) + beta
        if fp.mode == "rotating_field" and not dr.geometric_compensation:
            z_common = z_common - fp.nu * np.cos(fp.epsilon)
        P, T, K = batch.size, t.size, batch.n_sites
        h = np.zeros((P, T, K, 3))
        h[..., 0] = cx[None, :, None]
        h[..., 1] = cy[None, :, None]
        h[..., 2] = a + z_common[None, :, None]
        dsec = batch.dipolar_b[:, None] * 0.5 * (3 * r_co[..., 2] ** 2 - 1)
        D = dsec[..., None, None] * np.diag([-1.0, -1.0, 2.0])
        return h, D

    # ip_full: exact transformation; every vector rotated by Rz(-theta_c)
    theta = programs.frame_phase(t)
    Rz = _rz(-theta)  # (T, 3, 3)
    sig_co = np.einsum("tij,pkjl,tml->ptkim", G, batch.tensors, G)
    vec = sig_co[..., 2]  # sigma_co z, (P, T, K, 3)
    vec = vec + ((amp * np.cos(theta + offset))[:, None] * d_co)[None, :, None, :]
    if fp.mode == "rotating_field":
        vec = vec - fp.nu * n[None, None, None, :]
    h = np.einsum("tij,ptkj->ptki", Rz, vec)
    h[..., 2] += (programs.larmor - programs.frame_frequency(t))[None, :, None]
    rr = 3 * np.einsum("pti,ptj->ptij", r_co, r_co) - np.eye(3)
    D = batch.dipolar_b[:, None, None, None] * np.einsum("tia,ptab,tjb->ptij", Rz, rr, Rz)
    return h, D


def build_hamiltonian(cluster, programs: Programs, t: float, mode: str) -> spinalg.Operator:
    """Hamiltonian (rad/s) of one cluster at time t."""
    batch = cluster if isinstance(cluster, ClusterBatch) else ClusterBatch.from_pairs([cluster])
    h, D = coefficients(batch.subset(slice(0, 1)), programs, [t], mode)
    return spinalg.Operator(assemble(h[0, 0], D[0, 0], batch.n_sites), hamiltonian=True)


# --- step policy -------------------------------------------------------------------------------


def max_frequency(batch: ClusterBatch, programs: Programs, mode: str) -> float:
    """Highest frequency scale retained by a mode (Hz)."""
    dr, fp = programs.drive, programs.fieldprog
    noise_pad = 1.0 + (5 * np.abs(programs.noise.values).max() if programs.noise is not None else 0.0)
    shifts = float(np.abs(np.linalg.eigvalsh(batch.tensors)).max()) if batch.size else 0.0
    dip = float(batch.dipolar_b.max()) if batch.size else 0.0
    scale = drive_scale(dr, fp) if programs.drive_on else 0.0
    rabi = dr.Omega * scale * noise_pad * float(programs.drive_on)
    base = np.hypot(rabi, dr.Delta) + shifts + dip + fp.nu
    if mode == "ip_rwa_bs":
        return base + rabi**2 / (4 * dr.omega)
    if mode == "ip_full":
        return base + 2 * dr.omega + rabi
    return programs.larmor + 2 * rabi + shifts + dip + fp.nu


@dataclass(frozen=True)
class StepGrid:
    """Uniform substeps aligned with the fsLG intervals of one window."""

    window: float
    intervals: int
    substeps: int

    @property
    def dt(self) -> float:
        return self.window / (self.intervals * self.substeps)

    @property
    def steps_per_window(self) -> int:
        return self.intervals * self.substeps

    @property
    def steps_per_cycle(self) -> int:
        return 2 * self.substeps

    @property
    def cycles(self) -> int:
        return self.intervals // 2

    def midpoints(self, p: int = 0) -> np.ndarray:
        k = np.arange(self.steps_per_window)
        return p * self.window + (k + 0.5) * self.dt


def step_grid(batch: ClusterBatch, programs: Programs, mode: str, oversample: float = MIN_OVERSAMPLE) -> StepGrid:
    if oversample < MIN_OVERSAMPLE:
        raise ModeError(f"oversample {oversample} below the minimum {MIN_OVERSAMPLE}")
    sched = programs.schedule
    dt_max = 1.0 / (oversample * max_frequency(batch, programs, mode))
    sub = int(np.ceil(sched.interval / dt_max))
    return StepGrid(programs.window, sched.intervals_per_window, sub)


def check_step_budget(batch: ClusterBatch, programs: Programs, mode: str, windows: int,
                      oversample: float = MIN_OVERSAMPLE, budget: int = LAB_STEP_BUDGET) -> int:
    grid = step_grid(batch, programs, mode, oversample)
    total = grid.steps_per_window * windows
    if mode != "ip_rwa_bs" and total > budget:
        raise ModeError(
            f"{mode} needs {total:.3g} steps for {windows} windows (budget {budget:.3g}); "
            "use ip_rwa_bs or a scaled carrier"
        )
    return total


# --- states and observables ---------------------------------------------------------------


def initial_kets(theta: np.ndarray, phi: np.ndarray, fieldprog: FieldProgram) -> np.ndarray:
    """Product kets from per-nucleus Bloch angles about n; theta, phi have shape (P, n_sites)."""
    u, v, n = fieldprog.axes
    vec = (
        (np.sin(theta) * np.cos(phi))[..., None] * u
        + (np.sin(theta) * np.sin(phi))[..., None] * v
        + np.cos(theta)[..., None] * n
    )
    return spinalg.product_kets(spinalg.kets_along(vec))


def observables(n_sites: int) -> np.ndarray:
    """(n_sites * 3, d, d): I_x, I_y, I_z of each site in laboratory coordinates."""
    single, _ = operator_basis(n_sites)
    return single.reshape(-1, *single.shape[-2:])


def to_cone_components(xyz: np.ndarray, fieldprog: FieldProgram) -> np.ndarray:
    """Convert (..., 3) Cartesian expectations into (u, v, n) components."""
    return xyz @ fieldprog.axes.T


def ket_expectations(psi: np.ndarray, n_sites: int) -> np.ndarray:
    """<I_a^k> for kets (B, d) -> (B, n_sites, 3)."""
    ops = observables(n_sites)
    vals = np.einsum("bi,oij,bj->bo", psi.conj(), ops, psi).real
    return vals.reshape(psi.shape[0], n_sites, 3)


@dataclass(frozen=True)
class WindowTrace:
    """Expectations of one cluster at one interrogation window (cone components)."""

    p: int
    t_ev: float
    I_u: np.ndarray
    I_v: np.ndarray
    I_n: np.ndarray
    state: spinalg.DensityState | None = None


@dataclass(frozen=True, eq=False)
class WindowRecord:
    """Batch of window expectations: values has shape (W, P, n_sites, 3) in (u, v, n)."""

    p: np.ndarray
    nu: float
    values: np.ndarray
    kets: np.ndarray | None = None  # (W, P, d) if retained

    def traces(self, cluster: int) -> list[WindowTrace]:
        out = []
        for w, p in enumerate(self.p):
            st = None
            if self.kets is not None:
                st = spinalg.DensityState.from_ket(self.kets[w, cluster])
            v = self.values[w, cluster]
            out.append(WindowTrace(int(p), p / self.nu, v[:, 0], v[:, 1], v[:, 2], st))
        return out


# --- brute-force stepping -------------------------------------------------------------------


def _frame_unitary_lab_to_ip(programs: Programs, t: float, n_sites: int) -> np.ndarray:
    """V(t) with psi_ip = V^dagger psi_lab (field co-rotation, then carrier)."""
    fp, dr = programs.fieldprog, programs.drive
    single, _ = operator_basis(n_sites)
    In = np.einsum("a,kaij->ij", fp.n_hat, single)
    Iz = single[:, 2].sum(axis=0)
    R = spinalg.propagator(In, fp.field_phase(t))
    C = spinalg.propagator(Iz, programs.frame_phase(t))
    return R @ C


_CF4_NODES = (0.5 - np.sqrt(3) / 6, 0.5 + np.sqrt(3) / 6)
_CF4_WEIGHTS = ((3 - 2 * np.sqrt(3)) / 12, (3 + 2 * np.sqrt(3)) / 12)


def _exp_step(H: np.ndarray, dt: float) -> np.ndarray:
    w, v = np.linalg.eigh(H)
    if np.abs(w).max() * dt > spinalg.STEP_GUARD:
        raise EngineError("step guard violated; increase oversample")
    return (v * np.exp(-1j * w * dt)[..., None, :]) @ np.swapaxes(v.conj(), -1, -2)


def _step_propagators(batch, programs, t0, dt, mode):
    """Fourth-order commutator-free Magnus propagators for steps starting at t0.

    The secular frame is slowly varying and uses the plain midpoint rule; the
    carrier-resolving frames need the higher order to converge at a sane step.
    """
    n_sites = batch.n_sites
    if mode == "ip_rwa_bs":
        h, D = coefficients(batch, programs, t0 + 0.5 * dt, mode)
        return _exp_step(assemble(h, D, n_sites), dt)
    H = [assemble(*coefficients(batch, programs, t0 + c * dt, mode), n_sites) for c in _CF4_NODES]
    a1, a2 = _CF4_WEIGHTS
    first = _exp_step(a2 * H[0] + a1 * H[1], dt)
    second = _exp_step(a1 * H[0] + a2 * H[1], dt)
    return second @ first


def propagate_reference(
    batch: ClusterBatch,
    programs: Programs,
    psi0: np.ndarray,
    windows: int,
    mode: str,
    oversample: float = MIN_OVERSAMPLE,
    chunk: int = 2048,
    sample_every: int | None = None,
    keep_kets: bool = False,
):
    """Step-by-step propagation with exact exponentials at step midpoints.

    Returns a WindowRecord with `windows + 1` entries (p = 0..windows), all in the
    interaction-picture frame.  With `sample_every`, also returns the time grid
    and the expectations every that many steps.
    """
    check_step_budget(batch, programs, mode, windows, oversample)
    grid = step_grid(batch, programs, mode, oversample)
    n_sites, dt = batch.n_sites, grid.dt
    psi = np.array(psi0, dtype=complex)
    total = grid.steps_per_window * windows
    rec, kets = [ket_expectations(psi, n_sites)], [psi.copy()]
    samples_t, samples = ([0.0], [rec[0]]) if sample_every else (None, None)
    step = 0
    while step < total:
        m = min(chunk, total - step)
        U = _step_propagators(batch, programs, np.arange(step, step + m) * dt, dt, mode)
        for j in range(m):
            psi = np.einsum("bij,bj->bi", U[:, j], psi)
            k = step + j + 1
            if sample_every and k % sample_every == 0:
                samples_t.append(k * dt)
                samples.append(_ip_expectations(psi, programs, k * dt, mode, n_sites))
            if k % grid.steps_per_window == 0:
                if not np.all(np.isfinite(psi)):
                    raise EngineError("non-finite state encountered")
                rec.append(_ip_expectations(psi, programs, k * dt, mode, n_sites))
                kets.append(_ip_kets(psi, programs, k * dt, mode, n_sites))
        step += m
    values = to_cone_components(np.array(rec), programs.fieldprog)
    record = WindowRecord(np.arange(windows + 1), programs.fieldprog.nu, values,
                          np.array(kets) if keep_kets else None)
    if sample_every:
        return record, np.array(samples_t), to_cone_components(np.array(samples), programs.fieldprog)
    return record


def _ip_kets(psi, programs, t, mode, n_sites):
    if mode != "lab_exact":
        return psi.copy()
    V = _frame_unitary_lab_to_ip(programs, t, n_sites)
    return psi @ V.conj()  # (V^dagger psi) for each row


def _ip_expectations(psi, programs, t, mode, n_sites):
    return ket_expectations(_ip_kets(psi, programs, t, mode, n_sites), n_sites)


# --- window-periodic fast path --------------------------------------------------------------


@njit(cache=True, nogil=True, inline="always")
def _mm(a, b, out):
    d = a.shape[0]
    for i in range(d):
        for j in range(d):
            s = 0j
            for k in range(d):
                s += a[i, k] * b[k, j]
            out[i, j] = s


@njit(cache=True, nogil=True)
def _expm_into(A, order, out, tmp):
    """exp(A) by Horner-form Taylor series; |A| is kept small by the step guard."""
    d = A.shape[0]
    for i in range(d):
        for j in range(d):
            out[i, j] = 1.0 if i == j else 0.0
    for k in range(order, 0, -1):
        _mm(A, out, tmp)
        for i in range(d):
            for j in range(d):
                out[i, j] = tmp[i, j] / k
            out[i, i] += 1.0


@njit(cache=True, nogil=True)
def _cycle_kernel(H, Hd, dt, steps_per_cycle):
    """Per-cycle propagators and first-order noise generators.

    H: (B, N, d, d) Hamiltonian at step midpoints; Hd: (N, d, d) its derivative
    with respect to the relative amplitude error; both in rad/s.
    """
    B, N, d = H.shape[0], H.shape[1], H.shape[2]
    C = N // steps_per_cycle
    U = np.zeros((B, C, d, d), dtype=np.complex128)
    K = np.zeros((B, C, d, d), dtype=np.complex128)
    A = np.empty((d, d), dtype=np.complex128)
    Eh = np.empty((d, d), dtype=np.complex128)
    tmp = np.empty((d, d), dtype=np.complex128)
    W = np.empty((d, d), dtype=np.complex128)
    HW = np.empty((d, d), dtype=np.complex128)
    Ucum = np.empty((d, d), dtype=np.complex128)
    for b in range(B):
        for c in range(C):
            for i in range(d):
                for j in range(d):
                    Ucum[i, j] = 1.0 if i == j else 0.0
            Kc = np.zeros((d, d), dtype=np.complex128)
            for jj in range(steps_per_cycle):
                n = c * steps_per_cycle + jj
                for i in range(d):
                    for j in range(d):
                        A[i, j] = -0.5j * dt * H[b, n, i, j]
                _expm_into(A, 9, Eh, tmp)
                _mm(Eh, Ucum, W)
                _mm(Hd[n], W, HW)
                for i in range(d):
                    for j in range(i, d):
                        s = 0j
                        for k in range(d):
                            s += np.conj(W[k, i]) * HW[k, j]
                        Kc[i, j] += dt * s
                _mm(Eh, W, Ucum)
            for i in range(d):
                for j in range(d):
                    U[b, c, i, j] = Ucum[i, j]
                for j in range(i + 1, d):
                    K[b, c, i, j] = Kc[i, j]
                    K[b, c, j, i] = np.conj(Kc[i, j])
                K[b, c, i, i] = Kc[i, i].real
    return U, K


@njit(cache=True, nogil=True)
def _window_kernel(U, V, lam, psi0, noise, ops, use_noise):
    """Advance kets cycle by cycle for all windows; record <ops> at each window start.

    U: (B, C, d, d) cycle propagators; V, lam: eigen-decomposition of the
    generators; noise: (W, C) relative amplitude error per cycle.
    Returns (W + 1, B, n_ops).
    """
    B, C, d = U.shape[0], U.shape[1], U.shape[2]
    W = noise.shape[0]
    n_ops = ops.shape[0]
    out = np.zeros((W + 1, B, n_ops))
    for b in range(B):
        psi = psi0[b].copy()
        for w in range(W + 1):
            for o in range(n_ops):
                acc = 0.0
                for i in range(d):
                    s = 0j
                    for j in range(d):
                        s += ops[o, i, j] * psi[j]
                    acc += (np.conj(psi[i]) * s).real
                out[w, b, o] = acc
            if w == W:
                break
            for c in range(C):
                if use_noise:
                    x = noise[w, c]
                    tmp = np.zeros(d, dtype=np.complex128)
                    for i in range(d):
                        s = 0j
                        for j in range(d):
                            s += np.conj(V[b, c, j, i]) * psi[j]
                        tmp[i] = s * np.exp(-1j * x * lam[b, c, i])
                    for i in range(d):
                        s = 0j
                        for j in range(d):
                            s += V[b, c, i, j] * tmp[j]
                        psi[i] = s
                nxt = np.zeros(d, dtype=np.complex128)
                for i in range(d):
                    s = 0j
                    for j in range(d):
                        s += U[b, c, i, j] * psi[j]
                    nxt[i] = s
                psi = nxt
    return out


@dataclass(frozen=True, eq=False)
class CyclePropagators:
    grid: StepGrid
    U: np.ndarray  # (P, C, d, d)
    V: np.ndarray  # eigenvectors of the noise generators
    lam: np.ndarray  # eigenvalues (rad per unit relative error)


def noise_derivative(batch: ClusterBatch, programs: Programs, t: np.ndarray) -> np.ndarray:
    """d h / d x of the ip_rwa_bs coefficients (x the relative amplitude error), linearized."""
    quiet = replace(programs, noise=None)
    h0, _ = coefficients(batch.subset(slice(0, 1)), quiet, t, "ip_rwa_bs")
    dr = programs.drive
    hd = np.zeros_like(h0[0])  # (T, K, 3)
    hd[..., :2] = h0[0, ..., :2]
    beta = (h0[0, :, 0, 0] ** 2 + h0[0, :, 0, 1] ** 2) / (4 * dr.omega)
    hd[..., 2] = 2 * beta[:, None]
    return hd


def build_cycle_propagators(
    batch: ClusterBatch, programs: Programs, oversample: float = MIN_OVERSAMPLE,
    chunk: int = 32, threads: int = 1,
) -> CyclePropagators:
    """Window-periodic ip_rwa_bs propagators for every fsLG cycle of one window."""
    quiet = replace(programs, noise=None)
    grid = step_grid(batch, programs, "ip_rwa_bs", oversample)
    t = grid.midpoints(0)
    hd = noise_derivative(batch, programs, t)
    Hd1 = assemble(hd, np.zeros(hd.shape[:1] + (3, 3)), batch.n_sites)  # (T, d, d)

    def work(lo):
        sub = batch.subset(slice(lo, lo + chunk))
        h, D = coefficients(sub, quiet, t, "ip_rwa_bs")
        H = assemble(h, D, batch.n_sites)
        probe = H[:, :: max(1, H.shape[1] // 64)]
        if np.abs(np.linalg.eigvalsh(probe)).max() * grid.dt > spinalg.STEP_GUARD:
            raise EngineError("step guard violated; increase oversample")
        return _cycle_kernel(H, Hd1, grid.dt, grid.steps_per_cycle)

    starts = list(range(0, batch.size, chunk))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(lo) for lo in starts]
    U = np.concatenate([p[0] for p in parts])
    K = np.concatenate([p[1] for p in parts])
    lam, V = np.linalg.eigh(K)
    return CyclePropagators(grid, U, V, lam)


def cycle_noise(programs: Programs, grid: StepGrid, windows: int) -> np.ndarray:
    """Relative amplitude error per (window, cycle), read at cycle midpoints."""
    cyc = grid.window / grid.cycles
    t = (np.arange(windows * grid.cycles) + 0.5) * cyc
    return programs.noise_at(t).reshape(windows, grid.cycles)


def propagate_fast(
    props: CyclePropagators, programs: Programs, psi0: np.ndarray, windows: int,
    n_sites: int, chunk: int = 256, threads: int = 1,
) -> WindowRecord:
    """Advance kets through `windows` field periods using the cycle propagators."""
    noise = cycle_noise(programs, props.grid, windows)
    use_noise = bool(np.any(noise))
    ops = observables(n_sites)

    def work(lo):
        sl = slice(lo, lo + chunk)
        return _window_kernel(props.U[sl], props.V[sl], props.lam[sl], psi0[sl], noise, ops, use_noise)

    starts = list(range(0, psi0.shape[0], chunk))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(lo) for lo in starts]
    raw = np.concatenate(parts, axis=1)
    if not np.all(np.isfinite(raw)):
        raise EngineError("non-finite expectation values")
    vals = raw.reshape(windows + 1, psi0.shape[0], n_sites, 3)
    return WindowRecord(np.arange(windows + 1), programs.fieldprog.nu,
                        to_cone_components(vals, programs.fieldprog))


def propagate_window(
    batch: ClusterBatch, programs: Programs, psi0: np.ndarray, p_from: int, p_to: int,
    mode: str = "ip_rwa_bs", oversample: float = MIN_OVERSAMPLE, threads: int = 1,
) -> WindowRecord:
    """Propagate from window 0 and report windows p_from..p_to (inclusive)."""
    if not p_to > p_from >= 0:
        raise ValueError("need p_to > p_from >= 0")
    if mode == "ip_rwa_bs":
        props = build_cycle_propagators(batch, programs, oversample, threads=threads)
        rec = propagate_fast(props, programs, psi0, p_to, batch.n_sites, threads=threads)
    else:
        rec = propagate_reference(batch, programs, psi0, p_to, mode, oversample)
    sl = slice(p_from, p_to + 1)
    return WindowRecord(rec.p[sl], rec.nu, rec.values[sl])


# --- average Hamiltonian tools ---------------------------------------------------------------


class QuadratureError(RuntimeError):
    pass


def _magnus_once(sampler, T: float, n: int):
    h = T / n
    t = (np.arange(n) + 0.5) * h
    H = np.asarray(sampler(t))
    H1 = H.sum(axis=0) * h / T
    C = np.cumsum(H, axis=0) * h - H * h  # strictly earlier cells
    comm = np.einsum("nij,njk->ik", H, C) - np.einsum("nij,njk->ik", C, H)
    H2 = comm * h / (2j * T)
    return 0.5 * (H1 + H1.conj().T), 0.5 * (H2 + H2.conj().T)


def magnus_orders(sampler, T: float, n_quadrature: int = 4096, rtol: float = 1e-3, check: bool = True):
    """First and second Magnus terms over [0, T].

    `sampler(t)` maps an array of times to an (n, d, d) stack of Hermitian
    matrices.  H1 = (1/T) int H; H2 = (1/2iT) int_0^T dt int_0^t ds [H(t), H(s)].
    The quadrature is repeated with twice the nodes and must agree to `rtol`.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    H1, H2 = _magnus_once(sampler, T, n_quadrature)
    if check:
        H1b, H2b = _magnus_once(sampler, T, 2 * n_quadrature)
        for a, b in ((H1, H1b), (H2, H2b)):
            scale = max(np.linalg.norm(b), 1e-300)
            if np.linalg.norm(a - b) / scale > rtol and np.linalg.norm(b) > 1e-12 * max(1.0, np.linalg.norm(H1b)):
                raise QuadratureError("Magnus quadrature not converged; increase n_quadrature")
        H1, H2 = H1b, H2b
    return spinalg.Operator(H1, hamiltonian=True), spinalg.Operator(H2, hamiltonian=True)


def lg_projection(h: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Secular part of single-spin coefficients along the effective-field axis."""
    return (h @ axis)[..., None] * axis


def predicted_effective_hamiltonian(iso, drive: DriveProgram | None) -> np.ndarray:
    """(delta_iso + Omega^2/(4 omega))/sqrt(3) per nucleus, in Hz along I_n."""
    bs = 0.0 if drive is None else drive.bloch_siegert
    return (np.asarray(iso, dtype=float) + bs) / np.sqrt(3.0)
