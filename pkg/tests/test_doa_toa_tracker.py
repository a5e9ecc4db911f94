import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from possync.array_channel import ChannelSnapshot, cylindrical_array, generate_snapshot, polarimetric_response, synthesize_eadf
from possync.doa_toa_tracker import (
    DTHETA,
    PHI,
    TAU,
    THETA,
    TRACKER_LAYOUT,
    TrackerState,
    TrackerTuning,
    canonicalize,
    default_grids,
    feasible_angles,
    init_tracker,
    matched_power,
    measurement_map,
    track_snapshots,
    tracker_step,
    tracker_transition,
)
from possync.filter_core import GaussianState
from possync.fusion import FilterKind

WAVELENGTH = 299792458.0 / 3.5e9
GAMMA = np.array([0.8 + 0.3j, -0.2 + 0.5j])
TRUTH = (0.7, 1.1, 30e-9)  # phi, theta, tau


@pytest.fixture(scope="module")
def eadf():
    return synthesize_eadf(cylindrical_array(WAVELENGTH, 10), 9, 9, 24, 24, 240e3, 19)


def _snapshot(eadf, phi, theta, tau, noise_var=0.0, seed=0, timestamp=0.0):
    return generate_snapshot(eadf, theta, phi, tau, GAMMA, noise_var, np.random.default_rng(seed), timestamp=timestamp)


def _state_at(phi, theta, tau, variances, tuning=TrackerTuning()):
    mean = [tau, phi, theta, 0.0, 0.0, 0.0]
    return TrackerState(GaussianState(mean, np.diag(variances), TRACKER_LAYOUT), tuning=tuning)


def test_tracker_transition_unit_blocks():
    # Test that dt=1 and unit sigmas give Q = [[I/3, I/2], [I/2, I]]
    model = tracker_transition(1.0, 1.0, 1.0, 1.0)
    eye = np.eye(3)
    np.testing.assert_allclose(model.Q, np.block([[eye / 3, eye / 2], [eye / 2, eye]]))
    np.testing.assert_allclose(model.F[:3, 3:], eye)


def test_tracker_transition_rejects_negative_dt():
    # Test that a negative time step is rejected
    with pytest.raises(ValueError):
        tracker_transition(-0.1, 1.0, 1.0, 1.0)


def test_feasible_angles_reflects_at_pole():
    # Test that a negative polar angle reflects and turns the azimuth by pi
    phi, theta, flip = feasible_angles(0.5, -0.2)
    assert bool(flip)
    assert float(theta) == pytest.approx(0.2)
    assert float(phi) == pytest.approx(0.5 + np.pi - 2 * np.pi)


def test_canonicalize_flips_polar_rate():
    # Test that reflection negates the polar rate and its covariance couplings
    cov = np.eye(6)
    cov[THETA, DTHETA] = cov[DTHETA, THETA] = 0.3
    cov[PHI, THETA] = cov[THETA, PHI] = 0.2
    state = GaussianState([1e-8, 0.0, np.pi + 0.1, 0.0, 0.0, 2.0], cov, TRACKER_LAYOUT)
    out = canonicalize(state)
    assert out.mean[THETA] == pytest.approx(np.pi - 0.1)
    assert out.mean[DTHETA] == -2.0
    assert out.cov[THETA, DTHETA] == pytest.approx(0.3)
    assert out.cov[PHI, THETA] == pytest.approx(-0.2)


def test_tracker_state_rejects_infeasible_theta():
    # Test that a polar angle outside [0, pi] is rejected
    with pytest.raises(ValueError):
        _state_at(0.0, 3.5, 0.0, np.ones(6))


def test_measurement_map_reproduces_noiseless_snapshot(eadf):
    # Test that projecting a noiseless snapshot onto its own response returns it
    snap = _snapshot(eadf, *TRUTH)
    mapped = measurement_map(eadf, snap.g, np.array([TRUTH[2], TRUTH[0], TRUTH[1], 0.0, 0.0, 0.0]))[0]
    y = np.concatenate([snap.g.real, snap.g.imag])
    assert np.linalg.norm(mapped - y) < 1e-9 * np.linalg.norm(y)


def test_matched_power_matches_direct_projection(eadf):
    # Test that the separable grid evaluation equals the dense projection
    snap = _snapshot(eadf, *TRUTH, noise_var=0.01, seed=3)
    phis, thetas, taus = np.array([0.2, 0.7]), np.array([1.5, 1.1]), np.array([10e-9, 30e-9])
    power = matched_power(eadf, snap.g, phis, thetas, taus)
    for t, tau in enumerate(taus):
        for k in range(2):
            B = polarimetric_response(eadf, thetas[k], phis[k], tau)
            proj = B.conj().T @ snap.g
            expected = np.real(proj.conj() @ np.linalg.solve(B.conj().T @ B, proj))
            assert power[t, k] == pytest.approx(expected, rel=1e-8)


def test_init_tracker_noiseless_grid_node(eadf):
    # Test that a noiseless snapshot generated at a grid node initializes exactly on that node
    tau_grid, (phi_grid, theta_grid) = default_grids(eadf, 16, 12, 6)
    phi, theta, tau = phi_grid[4], theta_grid[2], tau_grid[3]
    ts = init_tracker(_snapshot(eadf, phi, theta, tau), eadf, tau_grid, (phi_grid, theta_grid))
    assert ts.phi == pytest.approx(phi)
    assert ts.theta == pytest.approx(theta)
    assert ts.tau == pytest.approx(tau)
    assert not ts.low_power
    assert ts.state.cov[PHI, PHI] == pytest.approx((2 * np.pi / 12) ** 2 / 12)


def test_init_tracker_resolves_delay_period(eadf):
    # Test that the coarse ToA selects the delay period of the fine estimate
    tau_grid, angles = default_grids(eadf, 16, 12, 6)
    tau = tau_grid[3]
    period = eadf.delay_period
    snap = _snapshot(eadf, angles[0][4], angles[1][2], tau)
    shifted = ChannelSnapshot(snap.g, snap.noise_var, coarse_toa=tau + 2 * period + 40e-9)
    ts = init_tracker(shifted, eadf, tau_grid, angles)
    assert ts.tau == pytest.approx(tau + 2 * period)


def test_init_tracker_flags_pure_noise(eadf):
    # Test that a noise-only snapshot is flagged as low power
    rng = np.random.default_rng(9)
    g = rng.standard_normal(eadf.n_samples) + 1j * rng.standard_normal(eadf.n_samples)
    tau_grid, angles = default_grids(eadf, 16, 12, 6)
    ts = init_tracker(ChannelSnapshot(g, 2.0), eadf, tau_grid, angles)
    assert ts.low_power


def test_init_tracker_rejects_zero_snapshot(eadf):
    # Test that an all-zero snapshot cannot initialize a tracker
    with pytest.raises(ValueError):
        init_tracker(ChannelSnapshot(np.zeros(eadf.n_samples), 0.0), eadf)


@pytest.mark.parametrize("kind", [FilterKind.UKF, FilterKind.EKF])
def test_tracker_step_noiseless_fixed_point(eadf, kind):
    # Test that a noiseless snapshot at the prior mean leaves the mean unchanged
    tuning = TrackerTuning(filter=kind)
    ts = _state_at(*TRUTH, [1e-20, 1e-6, 1e-6, 1e-12, 1e-4, 1e-4], tuning)
    new, estimate, R_hat = tracker_step(ts, _snapshot(eadf, *TRUTH, timestamp=0.1), eadf, 0.1)
    assert estimate[0] == pytest.approx(TRUTH[0], abs=1e-8)
    assert estimate[1] == pytest.approx(TRUTH[1], abs=1e-8)
    assert estimate[2] == pytest.approx(TRUTH[2], abs=1e-8)
    assert R_hat.shape == (3, 3)
    # (theta, phi, tau) order
    assert R_hat[1, 1] == pytest.approx(new.state.cov[PHI, PHI])
    assert R_hat[2, 2] == pytest.approx(new.state.cov[TAU, TAU])
    assert new.timestamp == pytest.approx(0.1)
    assert not new.needs_reinit


def test_tracker_stationary_without_noise(eadf):
    # Test that a static emitter with exact initialization does not drift
    ts = _state_at(*TRUTH, [1e-20, 1e-6, 1e-6, 1e-12, 1e-4, 1e-4])
    snap = _snapshot(eadf, *TRUTH)
    for _ in range(20):
        ts, estimate, _ = tracker_step(ts, snap, eadf, 0.1)
    assert abs(estimate[0] - TRUTH[0]) < 1e-9
    assert abs(estimate[1] - TRUTH[1]) < 1e-9
    assert abs(estimate[2] - TRUTH[2]) < 1e-12


def test_tracker_flags_divergence(eadf):
    # Test that repeated misfit snapshots set needs_reinit after the configured epoch count
    tuning = TrackerTuning(sigma_tau=0.0, sigma_phi=0.0, sigma_theta=0.0)
    ts = _state_at(*TRUTH, [1e-30, 1e-14, 1e-14, 1e-30, 1e-14, 1e-14], tuning)
    flags = []
    for k in range(3):
        snap = _snapshot(eadf, -2.0, 2.0, 500e-9, noise_var=1e-4, seed=k)
        ts, _, _ = tracker_step(ts, snap, eadf, 0.1)
        flags.append(ts.needs_reinit)
    assert flags == [False, False, True]
    assert ts.high_nees_count == 3


def test_track_snapshots_initializes_first(eadf):
    # Test that the generator initializes on the first snapshot and then steps
    snaps = [_snapshot(eadf, *TRUTH, timestamp=0.1 * k) for k in range(3)]
    out = list(track_snapshots(snaps, eadf))
    assert len(out) == 3
    assert out[0][0].high_nees_count == 0
    assert out[2][0].timestamp == pytest.approx(0.2)


@pytest.mark.slow
def test_tracking_refines_initial_grid(eadf):
    # Test that 50 epochs at 20 dB end well inside the initializer's grid cell
    truth = (0.4, 1.3, 120e-9)
    signal = polarimetric_response(eadf, truth[1], truth[0], truth[2]) @ GAMMA
    noise_var = float(np.vdot(signal, signal).real / signal.size / 100.0)
    tau_grid, angles = default_grids(eadf)
    phi_cell = 2 * np.pi / angles[0].size
    ts = None
    errors = []
    for k in range(50):
        snap = _snapshot(eadf, *truth, noise_var=noise_var, seed=100 + k, timestamp=0.1 * k)
        if ts is None:
            ts = init_tracker(snap, eadf, tau_grid, angles)
            init_error = abs(ts.phi - truth[0])
            continue
        ts, estimate, _ = tracker_step(ts, snap, eadf, 0.1)
        errors.append((estimate[0] - truth[0], estimate[1] - truth[1], estimate[2] - truth[2]))
    errors = np.array(errors[-20:])
    rmse_phi = np.sqrt(np.mean(errors[:, 0] ** 2))
    assert rmse_phi < phi_cell / 2
    assert rmse_phi <= max(init_error, phi_cell / 4)
    assert np.sqrt(np.mean(errors[:, 2] ** 2)) < 5e-9
