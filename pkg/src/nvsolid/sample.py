"""Nuclear sample model: shift tensors, pair geometry, sensor couplings, initial states."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.spatial.transform import Rotation

from .constants import (
    DIPOLAR_ANCHOR_DISTANCE,
    DIPOLAR_ANCHOR_HZ,
    GAMMA_PROTON,
    MU0,
    PLANCK,
)


class GeometryError(RuntimeError):
    """Pair placement could not satisfy the exclusion constraint."""


def _unit(b_hat) -> np.ndarray:
    b = np.asarray(b_hat, dtype=float)
    norms = np.linalg.norm(b, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError("b_hat must be a unit vector")
    return b


@dataclass(frozen=True, eq=False)
class ShiftTensor:
    """Chemical-shift tensor: principal values (Hz) and ZYZ Euler angles of its PAS."""

    principal_values: tuple[float, float, float]
    pas_orientation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "principal_values", tuple(float(v) for v in self.principal_values))
        object.__setattr__(self, "pas_orientation", tuple(float(v) for v in self.pas_orientation))

    def iso(self) -> float:
        return sum(self.principal_values) / 3.0

    def rotation(self) -> np.ndarray:
        """Columns are the principal axes expressed in laboratory coordinates."""
        return Rotation.from_euler("ZYZ", self.pas_orientation).as_matrix()

    def lab_tensor(self) -> np.ndarray:
        R = self.rotation()
        return R @ np.diag(self.principal_values) @ R.T


def secular_shift(tensor: ShiftTensor, b_hat) -> np.ndarray | float:
    """sum_i cos^2(theta_i) delta_i, theta_i the angle between b_hat and principal axis i.

    Accepts a single unit vector or an (..., 3) stack.
    """
    b = _unit(b_hat)
    cos = b @ tensor.rotation()
    out = (cos**2) @ np.asarray(tensor.principal_values)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SpinSpecies:
    gyromagnetic_ratio: float = GAMMA_PROTON
    label: str = "1H"


def literal_dipolar_prefactor(r: float, gamma: float) -> float:
    """mu0 gamma^2 h / (16 pi^2 r^3) with gamma in Hz/T (before the convention factor)."""
    return MU0 * gamma**2 * PLANCK / (16 * np.pi**2 * r**3)


# Factor that maps the literal prefactor onto the anchored 14.9 kHz coupling.
DIPOLAR_CONVENTION_FACTOR = DIPOLAR_ANCHOR_HZ / literal_dipolar_prefactor(
    DIPOLAR_ANCHOR_DISTANCE, GAMMA_PROTON
)


def dipolar_prefactor(r: float, gamma: float = GAMMA_PROTON) -> float:
    """Orientation-independent homonuclear coupling in Hz (value of d(theta) at theta = 0)."""
    return DIPOLAR_CONVENTION_FACTOR * literal_dipolar_prefactor(r, gamma)


def legendre2(c):
    return 0.5 * (3.0 * np.asarray(c) ** 2 - 1.0)


@dataclass(frozen=True, eq=False)
class PairCluster:
    positions: np.ndarray
    tensors: tuple[ShiftTensor, ShiftTensor]
    species: SpinSpecies = field(default_factory=SpinSpecies)
    dipolar_b: float = 0.0
    unit_internuclear: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    groups: tuple[int, int] = (0, 1)

    @classmethod
    def build(cls, positions, tensors, species=None, groups=(0, 1)) -> "PairCluster":
        species = species or SpinSpecies()
        pos = np.asarray(positions, dtype=float).reshape(2, 3)
        sep = pos[1] - pos[0]
        r = float(np.linalg.norm(sep))
        return cls(
            positions=pos,
            tensors=tuple(tensors),
            species=species,
            dipolar_b=dipolar_prefactor(r, species.gyromagnetic_ratio),
            unit_internuclear=sep / r,
            groups=tuple(groups),
        )

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.positions[1] - self.positions[0]))


def dipolar_secular(pair: PairCluster, b_hat):
    """d(theta) = b (3 cos^2 theta - 1)/2, coefficient of [3 I_S^1 I_S^2 - I^1.I^2]."""
    b = _unit(b_hat)
    out = pair.dipolar_b * legendre2(b @ pair.unit_internuclear)
    return float(out) if np.ndim(out) == 0 else out


# --- statistical polarization -------------------------------------------------


def cos_theta_from_uniform(u, x: float):
    """Inverse of the cumulative distribution of the polar angle.

    cos(theta) = -ln(e^-x + 2 u sinh x)/x, written in a cancellation-free form;
    x = 0 gives the uniform limit 1 - 2u.
    """
    u = np.asarray(u, dtype=float)
    if x == 0:
        return 1.0 - 2.0 * u
    return 1.0 - np.log1p(u * np.expm1(2.0 * x)) / x


def polar_cdf(theta, x: float):
    """Probability that the polar angle is at most theta."""
    c = np.cos(np.asarray(theta, dtype=float))
    return cos_cdf_from_top(c, x)


def cos_cdf_from_top(c, x: float):
    """P(cos(theta') >= c), i.e. the polar-angle CDF expressed through c = cos(theta)."""
    c = np.asarray(c, dtype=float)
    if x == 0:
        return (1.0 - c) / 2.0
    return np.expm1(x * (1.0 - c)) / np.expm1(2.0 * x)


def mean_cos_theta(x: float) -> float:
    if abs(x) < 1e-4:
        return -x / 3.0
    return 1.0 / x - 1.0 / np.tanh(x)


def mean_sin2_theta(x: float) -> float:
    if abs(x) < 1e-3:
        return 2.0 / 3.0 - 2.0 * x**2 / 45.0
    return 2.0 / (x * np.tanh(x)) - 2.0 / x**2


@dataclass(frozen=True, eq=False)
class BlochSample:
    angles: np.ndarray  # (n, 2): theta, phi
    beta_field_product: float

    @property
    def theta(self) -> np.ndarray:
        return self.angles[:, 0]

    @property
    def phi(self) -> np.ndarray:
        return self.angles[:, 1]


def sample_bloch(n: int, x: float, rng: np.random.Generator) -> BlochSample:
    if n < 1:
        raise ValueError("n must be at least 1")
    if x < 0:
        raise ValueError("x must be non-negative")
    u = rng.random(n)
    phi = rng.random(n) * 2 * np.pi
    c = np.clip(cos_theta_from_uniform(u, x), -1.0, 1.0)
    return BlochSample(np.column_stack([np.arccos(c), phi]), float(x))


def thermal_x(b0: float, temperature: float, gamma: float = GAMMA_PROTON) -> float:
    """x = beta gamma B0 with beta = h/(k T) and gamma in Hz/T."""
    from .constants import BOLTZMANN

    return PLANCK * gamma * b0 / (BOLTZMANN * temperature)


# --- detection geometry ---------------------------------------------------------


@dataclass(frozen=True)
class GeometryConfig:
    nv_depth: float = 5e-9
    pair_count: int = 16
    internuclear_distance: float = 0.25e-9
    exclusion_radius: float = 0.4e-9
    group_principal_values: tuple = ((352.0, 22.0, 456.0), (221.0, 27.0, 74.0))
    max_attempts: int = 100_000


def coupling_prefactor(gamma: float = GAMMA_PROTON) -> float:
    """mu0 h gamma sqrt(2/3) / (4 pi) in T m^3."""
    return MU0 * PLANCK * gamma * np.sqrt(2.0 / 3.0) / (4 * np.pi)


def coupling_weight(position, gamma: float = GAMMA_PROTON):
    """C_k in tesla per unit <I>: -(mu0 h/4pi) gamma sqrt(2/3) (3 l_z^2 - 1)/r^3."""
    pos = np.asarray(position, dtype=float)
    r = np.linalg.norm(pos, axis=-1)
    lz = pos[..., 2] / r
    return -coupling_prefactor(gamma) * (3 * lz**2 - 1) / r**3


def region_volume(nv_depth: float) -> float:
    return 2.0 / 3.0 * np.pi * nv_depth**3


def inside_region(points, nv_depth: float) -> np.ndarray:
    """Half ball of radius nv_depth resting on the surface plane z = nv_depth."""
    p = np.asarray(points, dtype=float)
    centre = np.array([0.0, 0.0, nv_depth])
    return (p[..., 2] >= nv_depth) & (np.linalg.norm(p - centre, axis=-1) <= nv_depth)


def uniform_in_region(n: int, nv_depth: float, rng: np.random.Generator) -> np.ndarray:
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    direction[:, 2] = np.abs(direction[:, 2])
    radius = nv_depth * rng.random(n) ** (1.0 / 3.0)
    return np.array([0.0, 0.0, nv_depth]) + radius[:, None] * direction


def f2_quadrature(nv_depth: float) -> float:
    """Integral of [(3 l_z^2 - 1)/r^3]^2 over the detection region (m^-3)."""
    d = nv_depth

    def integrand(rho, z):
        r2 = rho * rho + z * z
        return 2 * np.pi * rho * (3 * z * z / r2 - 1) ** 2 / r2**3

    val, _ = integrate.dblquad(
        integrand, d, 2 * d, 0.0, lambda z: np.sqrt(max(d * d - (z - d) ** 2, 0.0)),
        epsabs=0, epsrel=1e-10,
    )
    return float(val)


@dataclass(frozen=True, eq=False)
class DetectionGeometry:
    nv_depth: float
    pair_count: int
    positions: np.ndarray  # (2 * pair_count, 3), nucleus 2k and 2k+1 form pair k
    coupling_weights: np.ndarray  # (2 * pair_count,)
    groups: np.ndarray  # group index per nucleus
    F2: float

    @property
    def volume(self) -> float:
        return region_volume(self.nv_depth)


def random_shift_tensor(principal_values, rng: np.random.Generator) -> ShiftTensor:
    euler = Rotation.random(random_state=rng).as_euler("ZYZ")
    return ShiftTensor(tuple(principal_values), tuple(euler))


def place_pairs(
    config: GeometryConfig, rng: np.random.Generator, species: SpinSpecies | None = None,
    f2: float | None = None,
) -> tuple[DetectionGeometry, list[PairCluster]]:
    """Random pairs (one nucleus from the first and one from the last group) in the region."""
    if config.pair_count < 1:
        raise ValueError("pair_count must be at least 1")
    if config.nv_depth <= 0:
        raise ValueError("nv_depth must be positive")
    species = species or SpinSpecies()
    gvals = config.group_principal_values
    g_first, g_last = 0, len(gvals) - 1
    half = config.internuclear_distance / 2
    placed: list[np.ndarray] = []
    attempts = 0
    while len(placed) < config.pair_count:
        attempts += 1
        if attempts > config.max_attempts:
            raise GeometryError(
                f"placed {len(placed)} of {config.pair_count} pairs after {config.max_attempts} attempts"
            )
        centre = uniform_in_region(1, config.nv_depth, rng)[0]
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        pos = np.array([centre - half * axis, centre + half * axis])
        if not inside_region(pos, config.nv_depth).all():
            continue
        if placed:
            others = np.concatenate(placed)
            gaps = np.linalg.norm(others[:, None, :] - pos[None, :, :], axis=-1)
            if gaps.min() < config.exclusion_radius:
                continue
        placed.append(pos)
    pairs = []
    for pos in placed:
        tensors = (
            random_shift_tensor(gvals[g_first], rng),
            random_shift_tensor(gvals[g_last], rng),
        )
        pairs.append(PairCluster.build(pos, tensors, species, groups=(g_first, g_last)))
    positions = np.concatenate(placed)
    geometry = DetectionGeometry(
        nv_depth=config.nv_depth,
        pair_count=config.pair_count,
        positions=positions,
        coupling_weights=coupling_weight(positions, species.gyromagnetic_ratio),
        groups=np.tile([g_first, g_last], config.pair_count),
        F2=f2_quadrature(config.nv_depth) if f2 is None else f2,
    )
    return geometry, pairs
