import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from nvsolid import spinalg
from nvsolid.spinalg import DensityState, Operator, SpinAlgebraError

finite = st.floats(-5, 5, allow_nan=False)


def random_hermitian(rng, d, scale=1.0):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * (a + a.conj().T) / 2


@pytest.mark.parametrize("n", [1, 2, 3])
def test_spin_commutation_relations(n):
    basis = spinalg.spin_basis(n)
    for k in range(n):
        x, y, z = basis[k]
        assert np.allclose(x @ y - y @ x, 1j * z)
        assert np.allclose(y @ z - z @ y, 1j * x)
        assert np.allclose(z @ x - x @ z, 1j * y)
        assert np.allclose(x @ x + y @ y + z @ z, 0.75 * np.eye(2**n))
    if n > 1:
        assert np.allclose(basis[0, 0] @ basis[1, 1], basis[1, 1] @ basis[0, 0])


def test_embedding_rejects_bad_input():
    with pytest.raises(SpinAlgebraError):
        spinalg.embed_single_site("w", 0, 1)
    with pytest.raises(SpinAlgebraError):
        spinalg.embed_single_site("x", 2, 2)
    with pytest.raises(SpinAlgebraError):
        spinalg.embed_single_site((1.0, 1.0, 0.0), 0, 1)
    with pytest.raises(SpinAlgebraError):
        spinalg.embed_single_site("x", 0, 5)


def test_operator_validation():
    with pytest.raises(SpinAlgebraError):
        Operator(np.array([[0, 1], [0, 0]]), hamiltonian=True)
    with pytest.raises(SpinAlgebraError):
        Operator(np.zeros((3, 3)))
    with pytest.raises(SpinAlgebraError):
        DensityState(np.diag([0.7, 0.7]))
    with pytest.raises(SpinAlgebraError):
        DensityState(np.diag([1.2, -0.2]))


def test_propagator_matches_expm(rng):
    for d in (2, 4, 8):
        H = random_hermitian(rng, d)
        assert np.allclose(spinalg.propagator(H, 0.37), expm(-1j * 0.37 * H), atol=1e-12)


def test_evolution_matches_rk4_oracle(rng):
    """Piecewise-constant exact steps agree with an adaptive ODE solution of the Liouville equation."""
    H0, H1 = random_hermitian(rng, 4), random_hermitian(rng, 4)
    rho0 = DensityState.from_ket(rng.normal(size=4) + 1j * rng.normal(size=4))
    T, n = 1.0, 4000
    rho = rho0
    for k in range(n):
        tm = (k + 0.5) * T / n
        rho = spinalg.evolve_step(rho, Operator(H0 + np.cos(3 * tm) * H1, True), T / n)

    def rhs(t, y):
        r = y.reshape(4, 4)
        H = H0 + np.cos(3 * t) * H1
        return (-1j * (H @ r - r @ H)).ravel()

    sol = solve_ivp(rhs, (0, T), rho0.matrix.ravel().astype(complex), method="RK45", rtol=1e-10, atol=1e-12)
    assert np.abs(sol.y[:, -1].reshape(4, 4) - rho.matrix).max() < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.4))
def test_evolution_preserves_invariants(seed, dt):
    r = np.random.default_rng(seed)
    H = random_hermitian(r, 4)
    H = H / spinalg.spectral_norm(H)
    rho = DensityState.from_ket(r.normal(size=4) + 1j * r.normal(size=4))
    out = spinalg.evolve_step(rho, Operator(H, True), dt)
    assert abs(np.trace(out.matrix) - 1) < 1e-12
    assert abs(out.purity() - 1) < 1e-12
    U = spinalg.propagator(H, dt)
    assert np.allclose(U @ U.conj().T, np.eye(4), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.2), st.floats(0.01, 0.2))
def test_propagator_composition(seed, t1, t2):
    H = random_hermitian(np.random.default_rng(seed), 4)
    assert np.allclose(spinalg.propagator(H, t1) @ spinalg.propagator(H, t2), spinalg.propagator(H, t1 + t2), atol=1e-12)


def test_step_guard():
    H = Operator(np.diag([10.0, -10.0]), True)
    with pytest.raises(SpinAlgebraError):
        spinalg.evolve_step(DensityState.maximally_mixed(2), H, 0.1)
    with pytest.raises(SpinAlgebraError):
        spinalg.evolve_step(DensityState.maximally_mixed(2), H, 0.0)


def test_expectation_dimension_mismatch():
    with pytest.raises(SpinAlgebraError):
        spinalg.expectation(DensityState.maximally_mixed(2), spinalg.embed_single_site("x", 0, 2))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, np.pi), st.floats(0, 2 * np.pi))
def test_bloch_ket_points_along_requested_direction(theta, phi):
    ket = spinalg.bloch_ket(theta, phi)
    rho = DensityState.from_ket(ket)
    vec = [2 * spinalg.expectation(rho, spinalg.embed_single_site(a, 0, 1)) for a in "xyz"]
    expected = [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
    assert np.allclose(vec, expected, atol=1e-12)


def test_product_kets_match_kron(rng):
    single = rng.normal(size=(3, 2, 2)) + 1j * rng.normal(size=(3, 2, 2))
    out = spinalg.product_kets(single)
    for b in range(3):
        assert np.allclose(out[b], np.kron(single[b, 0], single[b, 1]))


def test_operator_algebra():
    x = spinalg.embed_single_site("x", 0, 1)
    y = spinalg.embed_single_site("y", 0, 1)
    z = spinalg.embed_single_site("z", 0, 1)
    assert np.allclose(x.commutator(y).matrix, 1j * z.matrix)
    assert (x + y).hamiltonian and (2.0 * x).hamiltonian
    assert not (1j * x).hamiltonian
