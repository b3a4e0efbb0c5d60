import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvsolid import sensor
from nvsolid.control import DriveProgram
from nvsolid.sensor import ReadoutConfig, ReadoutError

DRIVE = DriveProgram()
CFG = ReadoutConfig().resolve(DRIVE)
phase = st.floats(-np.pi, np.pi, allow_nan=False)


def test_resolved_readout_defaults():
    assert CFG.carrier == pytest.approx(np.sqrt(2) * DRIVE.Omega)
    assert CFG.n_pulses == 8
    assert CFG.t_prob == pytest.approx(4 / CFG.carrier)
    assert CFG.t_prob == pytest.approx(18.48e-6, rel=1e-3)
    assert ReadoutConfig(carrier_choice="omega").resolve(DRIVE).carrier == pytest.approx(DRIVE.Omega)
    with pytest.raises(ValueError):
        ReadoutConfig(t_prob=1.3 / (2 * CFG.carrier)).resolve(DRIVE)
    with pytest.raises(ReadoutError):
        sensor.dd_phase(1e-8, 0.3, ReadoutConfig())


@pytest.mark.parametrize("seq", ["XY4", "XY8"])
@pytest.mark.parametrize("psi", [0.3, 1.2, 2.0, -0.8])
def test_dd_phase_brute_force(seq, psi):
    cfg = ReadoutConfig(dd_sequence=seq).resolve(DRIVE)
    b = 1e-8
    field = lambda t: b * np.cos(2 * np.pi * cfg.carrier * t - psi)
    analytic = sensor.dd_phase(b, psi, cfg)
    assert sensor.simulate_dd(field, cfg) == pytest.approx(analytic, rel=0.01)
    assert sensor.dd_phase_from_field(field, cfg) == pytest.approx(analytic, rel=1e-4)


def test_dd_filter_rejects_off_resonant_field():
    off = lambda t: 1e-8 * np.cos(2 * np.pi * 2.0 * CFG.carrier * t)
    assert abs(sensor.dd_phase_from_field(off, CFG)) < 0.1 * sensor.dd_phase(1e-8, np.pi / 2, CFG)
    with pytest.warns(UserWarning):
        sensor.dd_phase_from_field(off, ReadoutConfig(spacing=0.6 / CFG.carrier, t_prob=4.8 / CFG.carrier).resolve(DRIVE))


def test_effective_field_quadratures():
    w = np.array([1e-8, -2e-8])
    Iu, Iv = np.array([0.3, 0.1]), np.array([-0.2, 0.4])
    t = np.array([0.0, 0.25 / CFG.carrier])
    B = sensor.effective_field(Iu, Iv, w, t, CFG.carrier)
    assert B[0] == pytest.approx(Iv @ w) and B[1] == pytest.approx(Iu @ w)
    with pytest.raises(ReadoutError):
        sensor.effective_field(Iu, Iv, w[:1], t, CFG.carrier)


@settings(max_examples=60, deadline=None)
@given(phase, phase, st.floats(0, 1))
def test_gate_sequence_closed_form(phi0, phip, damp):
    got = sensor.correlation_sequence(phi0, phip, damp)
    assert got == pytest.approx(0.5 * np.sin(phi0) * np.sin(phip) * damp, abs=1e-10)


def test_batch_matches_dense_gates(rng):
    phi0 = rng.normal(size=20)
    phi = rng.normal(size=(20, 30))
    damp = np.exp(-np.arange(30) / 25)
    batch = sensor.correlation_batch(phi0, phi, damp)
    dense = np.array([[sensor.correlation_sequence(a, b, d) for b, d in zip(row, damp)] for a, row in zip(phi0, phi)])
    assert np.abs(batch - dense).max() < 1e-12


def test_small_phase_limit():
    eps = 1e-3
    assert sensor.correlation_sequence(eps, 2 * eps) == pytest.approx(0.5 * eps * 2 * eps, rel=1e-5)


def test_stored_state_is_physical():
    rho = sensor.store_phase(0.7)
    assert np.allclose(rho, rho.conj().T) and np.trace(rho).real == pytest.approx(1.0)
    assert np.linalg.eigvalsh(rho).min() > -1e-12


def test_cross_terms_cancel_over_random_phases(rng):
    """Independent nuclei contribute only their own auto-correlation to the ensemble mean."""
    S, amp = 200_000, 0.02
    xi = rng.uniform(0, 2 * np.pi, size=(S, 2))
    phi0 = amp * np.cos(xi).sum(axis=1)
    phip = amp * (np.cos(xi[:, 0] + 0.9) + np.cos(xi[:, 1] + 2.1))
    mean = sensor.correlation_batch(phi0, phip[:, None], np.ones(1)).mean()
    expected = 0.5 * amp**2 * 0.5 * (np.cos(0.9) + np.cos(2.1))
    assert mean == pytest.approx(expected, abs=4 * amp**2 / np.sqrt(S))


def test_ensemble_average_and_sqrt_scaling(rng):
    data = rng.normal(size=(400, 16))
    sig = sensor.ensemble_average(data)
    assert np.allclose(sig.mean, data.mean(axis=0))
    small = sensor.ensemble_average(data[:100])
    assert np.median(small.stderr / sig.stderr) == pytest.approx(2.0, rel=0.1)
    with pytest.raises(ReadoutError):
        sensor.ensemble_average([])


def test_records_from_quadratures(rng):
    z = rng.normal(size=(3, 20)) * 1e-8 + 1j * rng.normal(size=(3, 20)) * 1e-8
    recs = sensor.records_from_quadratures(z, CFG, 1e3)
    assert len(recs) == 3 and recs[0].correlation.shape == (20,)
    assert np.allclose(recs[1].phi, CFG.phase_per_tesla * z[1].real)
    with pytest.raises(ReadoutError):
        sensor.records_from_quadratures(z, ReadoutConfig(readout_noise=0.1).resolve(DRIVE), 1e3)


def test_analytic_signal_shape():
    p = np.arange(64)
    sig = sensor.analytic_signal(p, [(16, 0.0)], None, CFG, F2=1.0, volume=1.0, damping=False)
    assert np.allclose(sig, sig[0])
    with pytest.raises(ReadoutError):
        sensor.signal_prefactor(CFG)
