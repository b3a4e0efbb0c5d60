"""Dense operator algebra for one to four spin-1/2 particles.

Hamiltonians handed to this module are in angular-frequency units (rad/s).
Matrices are plain numpy arrays wrapped in light immutable containers; the
batched helpers at the bottom work on stacks of matrices and are what the
propagation engine uses in its inner loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

MAX_SITES = 4
STEP_GUARD = 0.5

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULI = np.stack([SIGMA_X, SIGMA_Y, SIGMA_Z])

_AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


class SpinAlgebraError(ValueError):
    """Raised for malformed operators, states or step requests."""


def _check_dim(dim: int) -> None:
    if dim < 2 or dim > 2**MAX_SITES or dim & (dim - 1):
        raise SpinAlgebraError(f"dimension {dim} is not a power of two in [2, 16]")


def _hermitian_defect(m: np.ndarray) -> float:
    scale = max(np.linalg.norm(m), 1e-300)
    return float(np.linalg.norm(m - m.conj().T) / scale)


@dataclass(frozen=True, eq=False)
class Operator:
    """A dim x dim complex matrix; `hamiltonian=True` enforces Hermiticity."""

    matrix: np.ndarray
    hamiltonian: bool = False

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise SpinAlgebraError(f"operator must be square, got shape {m.shape}")
        _check_dim(m.shape[0])
        if self.hamiltonian and _hermitian_defect(m) > 1e-12:
            raise SpinAlgebraError("Hamiltonian is not Hermitian")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __add__(self, other: "Operator") -> "Operator":
        return Operator(self.matrix + other.matrix, self.hamiltonian and other.hamiltonian)

    def __mul__(self, c: float) -> "Operator":
        herm = self.hamiltonian and np.isreal(c)
        return Operator(self.matrix * c, bool(herm))

    __rmul__ = __mul__

    def __matmul__(self, other: "Operator") -> "Operator":
        return Operator(self.matrix @ other.matrix)

    def commutator(self, other: "Operator") -> "Operator":
        return Operator(self.matrix @ other.matrix - other.matrix @ self.matrix)

    def as_hamiltonian(self) -> "Operator":
        return Operator(self.matrix, hamiltonian=True)


@dataclass(frozen=True, eq=False)
class DensityState:
    """Hermitian, unit-trace, positive semidefinite matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise SpinAlgebraError(f"density matrix must be square, got shape {m.shape}")
        _check_dim(m.shape[0])
        if np.linalg.norm(m - m.conj().T) > 1e-10:
            raise SpinAlgebraError("density matrix is not Hermitian")
        if abs(np.trace(m) - 1.0) > 1e-10:
            raise SpinAlgebraError(f"density matrix trace {np.trace(m).real:.3e} != 1")
        if np.linalg.eigvalsh(m).min() < -1e-10:
            raise SpinAlgebraError("density matrix has a negative eigenvalue")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_ket(cls, ket: np.ndarray) -> "DensityState":
        k = np.asarray(ket, dtype=complex)
        k = k / np.linalg.norm(k)
        return cls(np.outer(k, k.conj()))

    @classmethod
    def maximally_mixed(cls, dim: int) -> "DensityState":
        return cls(np.eye(dim, dtype=complex) / dim)

    def purity(self) -> float:
        return float(np.real(np.trace(self.matrix @ self.matrix)))


def unit_direction(axis) -> np.ndarray:
    """Map 'x'/'y'/'z' or a 3-vector to a unit vector, rejecting non-unit input."""
    if isinstance(axis, str):
        try:
            return np.array(_AXES[axis.lower()])
        except KeyError:
            raise SpinAlgebraError(f"unknown axis {axis!r}") from None
    d = np.asarray(axis, dtype=float)
    if d.shape != (3,):
        raise SpinAlgebraError("direction must be a 3-vector")
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise SpinAlgebraError(f"direction norm {np.linalg.norm(d):.12f} is not 1")
    return d


def site_matrix(axis, site: int, n_sites: int) -> np.ndarray:
    """Raw matrix of (1/2) d.sigma acting on `site` of an `n_sites` register."""
    if not 1 <= n_sites <= MAX_SITES:
        raise SpinAlgebraError(f"n_sites={n_sites} outside 1..{MAX_SITES}")
    if not 0 <= site < n_sites:
        raise SpinAlgebraError(f"site {site} out of range for {n_sites} sites")
    d = unit_direction(axis)
    local = 0.5 * np.tensordot(d, PAULI, axes=1)
    factors = [np.eye(2, dtype=complex)] * n_sites
    factors[site] = local
    return reduce(np.kron, factors)


def embed_single_site(axis, site: int, n_sites: int) -> Operator:
    """Spin-1/2 component operator I_site^axis embedded by Kronecker products."""
    return Operator(site_matrix(axis, site, n_sites), hamiltonian=True)


def spin_basis(n_sites: int) -> np.ndarray:
    """Array of shape (n_sites, 3, d, d) holding I_x, I_y, I_z for every site."""
    return np.stack(
        [np.stack([site_matrix(a, k, n_sites) for a in "xyz"]) for k in range(n_sites)]
    )


def propagator(H: np.ndarray, dt: float) -> np.ndarray:
    """exp(-i H dt) for one or a stack of Hermitian matrices, via eigh."""
    w, v = np.linalg.eigh(H)
    phase = np.exp(-1j * w * dt)
    return (v * phase[..., None, :]) @ np.swapaxes(v.conj(), -1, -2)


def spectral_norm(H: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvalsh(H)).max())


def evolve_step(state: DensityState, H: Operator, dt: float) -> DensityState:
    """One exact step rho -> U rho U^dagger with U = exp(-i H dt); H in rad/s."""
    if dt <= 0:
        raise SpinAlgebraError("dt must be positive")
    if not isinstance(H, Operator):
        H = Operator(H)
    if _hermitian_defect(H.matrix) > 1e-12:
        raise SpinAlgebraError("Hamiltonian is not Hermitian")
    if H.dim != state.dim:
        raise SpinAlgebraError(f"dimension mismatch: H {H.dim}, state {state.dim}")
    if dt * spectral_norm(H.matrix) > STEP_GUARD:
        raise SpinAlgebraError(
            f"step guard violated: dt*|H| = {dt * spectral_norm(H.matrix):.3f} > {STEP_GUARD}"
        )
    U = propagator(H.matrix, dt)
    rho = U @ state.matrix @ U.conj().T
    return DensityState(0.5 * (rho + rho.conj().T))


def expectation(state: DensityState, op: Operator) -> float:
    """Re Tr(rho op)."""
    rho = state.matrix if isinstance(state, DensityState) else np.asarray(state)
    o = op.matrix if isinstance(op, Operator) else np.asarray(op)
    if rho.shape != o.shape:
        raise SpinAlgebraError(f"dimension mismatch: state {rho.shape}, operator {o.shape}")
    return float(np.real(np.trace(rho @ o)))


def bloch_ket(theta: float, phi: float, axes: np.ndarray | None = None) -> np.ndarray:
    """Pure spin-1/2 ket whose Bloch vector has polar angle theta, azimuth phi.

    `axes` is an optional (3, 3) array whose rows are the (first, second,
    polar) reference directions; the default is the Cartesian x, y, z.
    """
    local = np.array(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
    )
    n = local if axes is None else local @ np.asarray(axes)
    return ket_along(n)


def ket_along(n) -> np.ndarray:
    """+1/2 eigenvector of n.sigma/2 for a unit 3-vector n (fixed global phase)."""
    n = np.asarray(n, dtype=float)
    theta = np.arctan2(np.hypot(n[0], n[1]), n[2])
    phi = np.arctan2(n[1], n[0])
    return np.array([np.cos(theta / 2), np.exp(1j * phi) * np.sin(theta / 2)])


def kets_along(n: np.ndarray) -> np.ndarray:
    """Vectorized `ket_along` for an (..., 3) array of unit vectors."""
    theta = np.arctan2(np.hypot(n[..., 0], n[..., 1]), n[..., 2])
    phi = np.arctan2(n[..., 1], n[..., 0])
    return np.stack([np.cos(theta / 2) + 0j, np.exp(1j * phi) * np.sin(theta / 2)], axis=-1)


def product_kets(single: np.ndarray) -> np.ndarray:
    """Kronecker product of per-site kets; `single` has shape (batch, n_sites, 2)."""
    out = single[:, 0]
    for k in range(1, single.shape[1]):
        out = np.einsum("bi,bj->bij", out, single[:, k]).reshape(out.shape[0], -1)
    return out
