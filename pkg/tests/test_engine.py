import numpy as np
import pytest

from nvsolid import engine, spinalg
from nvsolid.control import DriveProgram, FieldProgram, NoisePath, NoiseProcess
from nvsolid.engine import ClusterBatch, ModeError, Programs
from nvsolid.sample import GeometryConfig, ShiftTensor, place_pairs


def pair_batch(n=2, seed=3):
    _, pairs = place_pairs(GeometryConfig(pair_count=n), np.random.default_rng(seed))
    return ClusterBatch.from_pairs(pairs)


def kets(batch, fp, seed=0):
    r = np.random.default_rng(seed)
    shape = (batch.size, batch.n_sites)
    return engine.initial_kets(r.uniform(0.3, 2.8, shape), r.uniform(0, 2 * np.pi, shape), fp)


@pytest.mark.parametrize("mode", engine.MODES)
def test_hamiltonians_are_hermitian(mode):
    batch = pair_batch()
    pr = Programs(FieldProgram(), DriveProgram(omega=500e3, p=10, phi_error=0.02))
    for t in (0.0, 1.3e-4, 7.7e-4):
        H = engine.build_hamiltonian(batch.subset(slice(1, 2)), pr, t, mode)
        assert np.allclose(H.matrix, H.matrix.conj().T)


def test_initial_kets_follow_requested_angles():
    fp = FieldProgram()
    theta, phi = np.array([[0.4, 2.0]]), np.array([[1.0, -2.5]])
    vals = engine.to_cone_components(engine.ket_expectations(engine.initial_kets(theta, phi, fp), 2), fp)
    expected = 0.5 * np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], -1)
    assert np.allclose(vals, expected, atol=1e-12)


def test_mode_and_budget_errors():
    batch = pair_batch(1)
    pr = Programs(FieldProgram(), DriveProgram())
    with pytest.raises(ModeError):
        engine.coefficients(batch, pr, [0.0], "lab")
    with pytest.raises(ModeError):
        engine.check_step_budget(batch, pr, "lab_exact", 512)
    with pytest.raises(ModeError):
        engine.step_grid(batch, pr, "ip_rwa_bs", oversample=5)


def test_fast_path_matches_reference_without_noise():
    batch, fp = pair_batch(3), FieldProgram()
    pr = Programs(fp, DriveProgram())
    psi = kets(batch, fp)
    ref = engine.propagate_reference(batch, pr, psi, 3, "ip_rwa_bs")
    fast = engine.propagate_fast(engine.build_cycle_propagators(batch, pr), pr, psi, 3, 2)
    assert np.abs(ref.values - fast.values).max() < 1e-9


def test_fast_path_matches_reference_with_noise():
    batch, fp = pair_batch(2), FieldProgram()
    noise = NoisePath.generate(NoiseProcess(0.0025, 1e-3, dt=1e-5), 4e-3, np.random.default_rng(9))
    pr = Programs(fp, DriveProgram(), noise)
    psi = kets(batch, fp)
    # reference with noise frozen per fsLG cycle, the same granularity the fast path uses
    grid = engine.step_grid(batch, pr, "ip_rwa_bs")
    cyc = grid.window / grid.cycles
    frozen = NoisePath(cyc, engine.cycle_noise(pr, grid, 3).ravel())
    ref = engine.propagate_reference(batch, Programs(fp, DriveProgram(), frozen), psi, 3, "ip_rwa_bs")
    props = engine.build_cycle_propagators(batch, Programs(fp, DriveProgram()))
    fast = engine.propagate_fast(props, pr, psi, 3, 2)
    quiet = engine.propagate_fast(props, Programs(fp, DriveProgram()), psi, 3, 2)
    err = np.abs(ref.values - fast.values).max()
    assert err < 1e-4
    assert err < 0.05 * np.abs(ref.values - quiet.values).max()


def test_reference_preserves_norm():
    batch, fp = pair_batch(2), FieldProgram()
    pr = Programs(fp, DriveProgram(omega=500e3, p=10))
    rec = engine.propagate_reference(batch, pr, kets(batch, fp), 2, "ip_full", keep_kets=True)
    assert np.allclose(np.linalg.norm(rec.kets, axis=-1), 1.0, atol=1e-12)
    state = rec.traces(0)[-1].state
    assert abs(np.trace(state.matrix) - 1) < 1e-12 and abs(state.purity() - 1) < 1e-10


def test_isolated_spin_precesses_at_predicted_line():
    fp, dr = FieldProgram(), DriveProgram()
    batch = ClusterBatch.from_tensors([ShiftTensor((352.0, 22.0, 456.0), (0.3, 1.0, 2.0))])
    pr = Programs(fp, dr)
    psi = engine.initial_kets(np.full((1, 1), np.pi / 2), np.zeros((1, 1)), fp)
    rec = engine.propagate_fast(engine.build_cycle_propagators(batch, pr), pr, psi, 40, 1)
    z = rec.values[:, 0, 0, 0] + 1j * rec.values[:, 0, 0, 1]
    freq = abs(np.polyfit(np.arange(41) / fp.nu, np.unwrap(np.angle(z)), 1)[0]) / (2 * np.pi)
    assert freq == pytest.approx(engine.predicted_effective_hamiltonian(830 / 3, dr), abs=0.5)


def test_rwa_residual_falls_with_carrier():
    """ip_full and ip_rwa_bs differ only by higher-order counter-rotating terms."""
    fp = FieldProgram(mode="static_field")
    batch = ClusterBatch.from_tensors([ShiftTensor((0.0, 0.0, 0.0))])
    psi = engine.initial_kets(np.full((1, 1), 1.2), np.full((1, 1), 0.4), fp)
    infid = []
    for om in (0.5e6, 1e6):
        pr = Programs(fp, DriveProgram(omega=om, p=int(10 * om / 0.5e6), fslg=False))
        a, b = (engine.propagate_reference(batch, pr, psi, 1, m, keep_kets=True).kets[-1, 0]
                for m in ("ip_full", "ip_rwa_bs"))
        infid.append(1 - abs(np.vdot(a, b)))
    assert infid[1] < infid[0] / 8


def test_propagate_window_slices():
    batch, fp = pair_batch(1), FieldProgram()
    pr = Programs(fp, DriveProgram())
    rec = engine.propagate_window(batch, pr, kets(batch, fp), 2, 4)
    assert list(rec.p) == [2, 3, 4] and rec.values.shape == (3, 1, 2, 3)
    with pytest.raises(ValueError):
        engine.propagate_window(batch, pr, kets(batch, fp), 3, 3)


def test_magnus_constant_and_two_level():
    H = spinalg.embed_single_site("x", 0, 1).matrix * 3.0
    H1, H2 = engine.magnus_orders(lambda t: np.broadcast_to(H, (t.size, 2, 2)), 1.0, 64)
    assert np.allclose(H1.matrix, H) and np.allclose(H2.matrix, 0)
    # H = a X + b cos(w t) Z over one period: the running integral of the cos term
    # averages to zero, so H2 vanishes; with sin instead it is -(a b / w) Y
    X, Y, Z = (spinalg.site_matrix(c, 0, 1) for c in "xyz")
    a, b, w = 2.0, 5.0, 2 * np.pi
    H1, H2 = engine.magnus_orders(lambda t: a * X + b * np.cos(w * t)[:, None, None] * Z, 1.0, 2048)
    assert np.allclose(H1.matrix, a * X, atol=1e-9)
    assert np.allclose(H2.matrix, 0.0, atol=1e-6)
    H1, H2 = engine.magnus_orders(lambda t: a * X + b * np.sin(w * t)[:, None, None] * Z, 1.0, 2048)
    assert np.allclose(H2.matrix, -a * b / w * Y, atol=1e-6)


def test_magnus_detects_unresolved_quadrature():
    Z = spinalg.site_matrix("z", 0, 1)
    X = spinalg.site_matrix("x", 0, 1)
    with pytest.raises(engine.QuadratureError):
        engine.magnus_orders(lambda t: X + np.sin(4000 * t)[:, None, None] * Z * 50, 1.0, 64, rtol=1e-6)
