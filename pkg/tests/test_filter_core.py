import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from possync.errors import NumericalFailure
from possync.filter_core import (
    GaussianState,
    LinearTransition,
    Tag,
    UtParams,
    cholesky_sqrt,
    clamp_psd,
    ekf_update,
    marginalize,
    nees,
    numerical_jacobian,
    predict_linear,
    sigma_points,
    solve_spd,
    ukf_update,
    unscented_transform,
    ut_weights,
    wrap_angle,
    wrap_residual,
)


def _scalar(mean=0.0, var=1.0):
    return GaussianState([mean], [[var]], (Tag.LINEAR,))


def test_ut_weights_small_example():
    # Test that n=1, alpha=1, kappa=2 gives lambda=2 and the textbook weights
    params = UtParams(alpha=1.0, beta=2.0, kappa=2.0)
    assert params.lam(1) == pytest.approx(2.0)
    wm, wc = ut_weights(1, params)
    np.testing.assert_allclose(wm, [2 / 3, 1 / 6, 1 / 6])
    assert wc[0] == pytest.approx(2 / 3 + 2.0)


def test_ut_weights_sum_to_one():
    # Test that the mean weights sum to one for several parameter sets
    for params in [UtParams(), UtParams(1.0, 2.0, -3.0, 24.0), UtParams(0.5, 0.0, 1.0)]:
        for n in (1, 3, 8):
            wm, _ = ut_weights(n, params)
            assert wm.sum() == pytest.approx(1.0, rel=1e-9)


def test_ut_weights_fusion_defaults():
    # Test that n=8 with alpha=1e-3 and kappa=0 gives the large negative centre weight
    wm, _ = ut_weights(8, UtParams(1e-3, 2.0, 0.0))
    lam = 8e-6 - 8.0
    assert wm[0] == pytest.approx(lam / 8e-6, rel=1e-6)
    assert wm[0] == pytest.approx(-999999.0, rel=1e-6)


def test_ut_weights_rejects_degenerate_spread():
    # Test that n + lambda = 0 is rejected
    with pytest.raises(ValueError):
        ut_weights(3, UtParams(1.0, 2.0, 0.0, lambda_override=-3.0))


def test_sigma_points_scalar():
    # Test that N(0, 1) with lambda=2 yields the points 0, +sqrt(3), -sqrt(3)
    sp = sigma_points(_scalar(), UtParams(alpha=1.0, beta=2.0, kappa=2.0))
    np.testing.assert_allclose(sp.points.ravel(), [0.0, np.sqrt(3.0), -np.sqrt(3.0)])


def test_sigma_points_zero_covariance():
    # Test that a zero covariance collapses every point onto the mean
    state = GaussianState([1.0, -2.0], np.zeros((2, 2)), (Tag.LINEAR, Tag.LINEAR))
    sp = sigma_points(state, UtParams())
    np.testing.assert_allclose(sp.points, np.tile([1.0, -2.0], (5, 1)))


def test_cholesky_sqrt_reconstructs_covariance():
    # Test that the factor reproduces a badly scaled covariance
    cov = np.diag([1e-18, 1.0, 1e4])
    cov[0, 1] = cov[1, 0] = 5e-10
    L = cholesky_sqrt(cov)
    np.testing.assert_allclose(L @ L.T, cov, rtol=1e-9, atol=1e-24)


def test_cholesky_sqrt_handles_semidefinite():
    # Test that a rank-deficient covariance still factorizes via jitter
    v = np.array([1.0, 2.0, 3.0])
    L = cholesky_sqrt(np.outer(v, v))
    np.testing.assert_allclose(L @ L.T, np.outer(v, v), atol=1e-9)


def test_predict_linear_identity():
    # Test that F = I and Q = 0 leave the state unchanged
    state = GaussianState([1.0, 2.0], [[2.0, 0.5], [0.5, 1.0]], (Tag.LINEAR, Tag.LINEAR))
    out = predict_linear(state, LinearTransition(np.eye(2), np.zeros((2, 2))))
    np.testing.assert_array_equal(out.mean, state.mean)
    np.testing.assert_array_equal(out.cov, state.cov)


def test_predict_linear_constant_velocity():
    # Test that the constant-velocity block moves the position by dt * v
    state = GaussianState([0.0, 1.0], np.eye(2), (Tag.LINEAR, Tag.LINEAR))
    out = predict_linear(state, LinearTransition([[1.0, 0.1], [0.0, 1.0]], np.zeros((2, 2))))
    np.testing.assert_allclose(out.mean, [0.1, 1.0])


def test_predict_linear_adds_process_noise():
    # Test that Q = I with F = I grows the covariance by I
    state = GaussianState([0.0, 0.0], np.diag([2.0, 3.0]), (Tag.LINEAR, Tag.LINEAR))
    out = predict_linear(state, LinearTransition(np.eye(2), np.eye(2)))
    np.testing.assert_allclose(out.cov, np.diag([3.0, 4.0]))


def test_predict_linear_dimension_mismatch():
    # Test that a transition of the wrong size is rejected
    with pytest.raises(ValueError):
        predict_linear(_scalar(), LinearTransition(np.eye(2), np.zeros((2, 2))))


def test_ukf_update_scalar_conjugate():
    # Test that the scalar conjugate case gives mean 0.5 and variance 0.5
    out = ukf_update(_scalar(), np.array([1.0]), lambda s: s, np.array([[1.0]]), UtParams())
    assert out.mean[0] == pytest.approx(0.5, rel=1e-9)
    assert out.cov[0, 0] == pytest.approx(0.5, rel=1e-9)


def test_ukf_update_uninformative_measurement():
    # Test that a huge R leaves the posterior at the prior
    prior = GaussianState([1.0, -1.0], np.diag([2.0, 3.0]), (Tag.LINEAR, Tag.LINEAR))
    out = ukf_update(prior, np.array([100.0, 100.0]), lambda s: s, 1e12 * np.eye(2), UtParams())
    np.testing.assert_allclose(out.mean, prior.mean, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(out.cov, prior.cov, rtol=1e-6, atol=1e-9)


def test_ukf_update_vectorized_matches_loop():
    # Test that the vectorized measurement path gives the same posterior
    prior = GaussianState([1.0, 2.0], np.diag([0.5, 0.2]), (Tag.LINEAR, Tag.LINEAR))
    h = lambda s: np.array([s[0] ** 2, s[0] * s[1]])
    hv = lambda S: np.column_stack([S[:, 0] ** 2, S[:, 0] * S[:, 1]])
    y = np.array([1.5, 2.5])
    a = ukf_update(prior, y, h, 0.1 * np.eye(2), UtParams(1.0, 2.0, 0.0))
    b = ukf_update(prior, y, hv, 0.1 * np.eye(2), UtParams(1.0, 2.0, 0.0), vectorized=True)
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12)
    np.testing.assert_allclose(a.cov, b.cov, rtol=1e-12)


def test_ukf_update_singular_innovation():
    # Test that an exactly singular innovation covariance raises NumericalFailure
    prior = GaussianState([0.0], [[0.0]], (Tag.LINEAR,))
    with pytest.raises(NumericalFailure):
        ukf_update(prior, np.array([1.0]), lambda s: s, np.array([[0.0]]), UtParams())


def test_ekf_update_scalar_conjugate():
    # Test that the EKF reproduces the scalar conjugate answer
    out = ekf_update(_scalar(), np.array([1.0]), lambda s: s, lambda s: np.eye(1), np.array([[1.0]]))
    assert out.mean[0] == pytest.approx(0.5)
    assert out.cov[0, 0] == pytest.approx(0.5)


def test_ekf_update_linear_matches_closed_form():
    # Test that a linear model gives the closed-form Kalman posterior
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    H = np.array([[1.0, 2.0], [0.0, 1.0]])
    R = np.diag([0.5, 0.25])
    m = np.array([0.5, -0.5])
    y = np.array([1.0, 0.0])
    prior = GaussianState(m, P, (Tag.LINEAR, Tag.LINEAR))
    out = ekf_update(prior, y, lambda s: H @ s, lambda s: H, R)
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    np.testing.assert_allclose(out.mean, m + K @ (y - H @ m), atol=1e-12)
    np.testing.assert_allclose(out.cov, P - K @ S @ K.T, atol=1e-12)


def test_ekf_update_finite_difference_jacobian():
    # Test that a finite-difference Jacobian gives the same posterior as the analytic one
    prior = GaussianState([1.0, 0.5], np.diag([0.1, 0.2]), (Tag.LINEAR, Tag.LINEAR))
    h = lambda s: np.array([np.sin(s[0]) * s[1], s[0] ** 2])
    analytic = lambda s: np.array([[np.cos(s[0]) * s[1], np.sin(s[0])], [2 * s[0], 0.0]])
    fd = lambda s: numerical_jacobian(h, s, 1e-6)
    y = np.array([0.5, 1.1])
    a = ekf_update(prior, y, h, analytic, 0.05 * np.eye(2))
    b = ekf_update(prior, y, h, fd, 0.05 * np.eye(2))
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-6)
    np.testing.assert_allclose(a.cov, b.cov, rtol=1e-6)


def test_wrap_angle_examples():
    # Test that wrap_angle maps into (-pi, pi]
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(3 * np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi - 0.1) == pytest.approx(np.pi - 0.1)
    np.testing.assert_allclose(wrap_angle(np.array([2 * np.pi, -0.5])), [0.0, -0.5], atol=1e-12)


def test_wrap_angle_rejects_nan():
    # Test that non-finite input raises
    with pytest.raises(ValueError):
        wrap_angle(float("nan"))


def test_wrap_residual_only_touches_angles():
    # Test that only ANGLE-tagged components are wrapped
    out = wrap_residual(np.array([2 * np.pi - 0.1, 10.0]), (Tag.ANGLE, Tag.LINEAR))
    np.testing.assert_allclose(out, [-0.1, 10.0])


def test_ukf_update_wraps_angle_residual():
    # Test that an update across the +-pi seam moves the short way round
    prior = GaussianState([np.radians(179.0)], [[np.radians(5.0) ** 2]], (Tag.ANGLE,))
    y = np.array([np.radians(-179.0)])
    out = ukf_update(prior, y, lambda s: s, np.array([[np.radians(5.0) ** 2]]), UtParams(1.0, 2.0, 0.0), (Tag.ANGLE,))
    assert abs(wrap_angle(out.mean[0] - np.pi)) < np.radians(1.5)


def test_gaussian_state_validation():
    # Test that bad shapes, asymmetric and indefinite covariances are rejected
    with pytest.raises(ValueError):
        GaussianState([0.0, 0.0], np.eye(3), (Tag.LINEAR, Tag.LINEAR))
    with pytest.raises(ValueError):
        GaussianState([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]], (Tag.LINEAR, Tag.LINEAR))
    with pytest.raises(ValueError):
        GaussianState([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], (Tag.LINEAR, Tag.LINEAR))
    with pytest.raises(ValueError):
        GaussianState([0.0], [[1.0]], (Tag.LINEAR, Tag.LINEAR))


def test_gaussian_state_is_read_only():
    # Test that the arrays held by a state cannot be mutated in place
    state = _scalar()
    with pytest.raises(ValueError):
        state.mean[0] = 1.0


def test_solve_spd_matches_inverse():
    # Test that solve_spd agrees with a dense inverse
    S = np.array([[4.0, 1.0], [1.0, 3.0]])
    B = np.array([[1.0, 0.0], [2.0, 1.0]])
    np.testing.assert_allclose(solve_spd(S, B), np.linalg.solve(S, B))


def test_nees_and_marginalize():
    # Test that NEES of a unit error under identity covariance is its squared norm and marginals keep blocks
    state = GaussianState([0.0, 0.0, 0.0], np.diag([1.0, 4.0, 9.0]), (Tag.LINEAR, Tag.ANGLE, Tag.LINEAR))
    assert nees(state, np.array([1.0, 2.0, 3.0])) == pytest.approx(3.0)
    m = marginalize(state, [0, 2])
    np.testing.assert_allclose(m.cov, np.diag([1.0, 9.0]))
    assert m.layout == (Tag.LINEAR, Tag.LINEAR)


def _random_state(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    return GaussianState(0.25 * rng.standard_normal(n), A @ A.T + 0.5 * np.eye(n), (Tag.LINEAR,) * n)


UT_PARAMS = [UtParams(), UtParams(1.0, 2.0, 0.0), UtParams(0.5, 2.0, 1.0)]


@pytest.mark.parametrize("params", UT_PARAMS)
def test_unscented_transform_is_exact_on_affine_maps(params):
    # Test that an affine map gets the exact mean A m + b and covariance A P A^T
    state = _random_state(4, 7)
    rng = np.random.default_rng(8)
    A = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    mean, cov, _ = unscented_transform(sigma_points(state, params), lambda x: A @ x + b)
    np.testing.assert_allclose(mean, A @ state.mean + b, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(cov, A @ state.cov @ A.T, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("params", UT_PARAMS)
def test_sigma_points_reconstruct_mean_and_covariance(params):
    # Test that the weighted sigma points give back the state moments
    state = _random_state(5, 9)
    sp = sigma_points(state, params)
    dx = sp.points - sp.points[0]
    mean = sp.points[0] + sp.weights_mean @ dx
    dev = sp.points - mean
    cov = (dev.T * sp.weights_cov) @ dev
    np.testing.assert_allclose(mean, state.mean, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(cov, state.cov, rtol=1e-10, atol=1e-10)


def test_ukf_update_equals_kalman_filter_on_linear_model():
    # Test that a multivariate linear-Gaussian update reproduces the Kalman posterior
    prior = _random_state(4, 10)
    rng = np.random.default_rng(11)
    H = rng.standard_normal((3, 4))
    B = rng.standard_normal((3, 3))
    R = B @ B.T + 0.1 * np.eye(3)
    y = rng.standard_normal(3)
    out = ukf_update(prior, y, lambda x: H @ x, R, UtParams())
    S = H @ prior.cov @ H.T + R
    K = prior.cov @ H.T @ np.linalg.inv(S)
    np.testing.assert_allclose(out.mean, prior.mean + K @ (y - H @ prior.mean), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(out.cov, prior.cov - K @ S @ K.T, rtol=1e-9, atol=1e-9)


def test_ekf_and_ukf_agree_for_linear_measurement():
    # Test that both updates give the same posterior when h is linear
    prior = _random_state(3, 12)
    H = np.array([[1.0, 0.5, 0.0], [0.0, 2.0, -1.0]])
    R = np.diag([0.3, 0.2])
    y = np.array([0.7, -1.2])
    a = ukf_update(prior, y, lambda x: H @ x, R, UtParams())
    b = ekf_update(prior, y, lambda x: H @ x, lambda x: H, R)
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(a.cov, b.cov, rtol=1e-9, atol=1e-9)


def test_solve_spd_rejects_non_finite_diagonal():
    # Test that NaN or negative variances raise NumericalFailure instead of a raw ValueError
    with pytest.raises(NumericalFailure):
        solve_spd(np.array([[np.nan, 0.0], [0.0, 1.0]]), np.ones(2))
    with pytest.raises(NumericalFailure):
        solve_spd(np.diag([1.0, -1e-30]), np.ones(2))
    with pytest.raises(NumericalFailure):
        solve_spd(np.eye(2), np.array([1.0, np.inf]))


def test_solve_spd_accepts_ill_conditioned_positive_definite():
    # Test that a positive definite matrix whose Cholesky pivots span 15 decades is still solved
    a = 1.0 - 4e-16
    S = np.array([[1.0, a], [a, 1.0]])
    x = solve_spd(S, np.array([1.0, -1.0]))
    assert np.all(np.isfinite(x))
    assert x[0] > 1e14 and x[1] < -1e14


def test_solve_spd_rejects_exactly_singular():
    # Test that a rank-deficient matrix with a positive diagonal raises NumericalFailure
    with pytest.raises(NumericalFailure):
        solve_spd(np.ones((2, 2)), np.ones(2))


def test_clamp_psd_projects_indefinite_mixed_unit_covariance():
    # Test that a covariance with a negative eigenvalue in the normalized frame becomes positive semidefinite
    cov = np.array([[1e-16, 1.1e-8], [1.1e-8, 1.0]])
    out = clamp_psd(cov, np.diag(cov))
    d = np.sqrt(np.diag(cov))
    assert np.linalg.eigvalsh(out / np.outer(d, d)).min() >= -1e-12
    np.testing.assert_array_equal(out, out.T)
    GaussianState([0.0, 0.0], out, (Tag.CLOCK_OFFSET, Tag.LINEAR))
    psd = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_array_equal(clamp_psd(psd, np.diag(psd)), psd)


def test_noiseless_update_collapses_variance_without_failure():
    # Test that a zero-noise measurement yields the measured value and a non-negative variance
    for update in (
        lambda p: ukf_update(p, np.array([0.3]), lambda s: s, np.zeros((1, 1)), UtParams()),
        lambda p: ekf_update(p, np.array([0.3]), lambda s: s, lambda s: np.eye(1), np.zeros((1, 1))),
    ):
        out = update(_scalar(0.0, 1e-8))
        assert out.mean[0] == pytest.approx(0.3, abs=1e-12)
        assert out.cov[0, 0] >= 0.0
        assert out.cov[0, 0] < 1e-20


def test_nees_is_nan_for_singular_covariance():
    # Test that NEES of a state with a zero-variance component is reported as NaN
    state = GaussianState([0.0, 0.0], np.diag([1.0, 0.0]), (Tag.LINEAR, Tag.LINEAR))
    assert np.isnan(nees(state, np.array([1.0, 0.0])))
