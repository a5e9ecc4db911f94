"""
Per-AN stage-1 tracker of [tau, phi, theta, dtau, dphi, dtheta] from channel snapshots.

The measurement map projects the snapshot onto the span of the polarimetric
response B(theta, phi, tau), so the complex path weights never enter the
state. Updates are iterated Gauss-Newton steps in information form; the
linearization comes either from sigma points (statistical) or from central
differences (EKF variant).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.stats import chi2

from possync.array_channel import ChannelSnapshot, Eadf
from possync.fusion import FilterKind
from possync.filter_core import (
    GaussianState,
    LinearTransition,
    Tag,
    UtParams,
    cholesky_sqrt,
    numerical_jacobian,
    predict_linear,
    sigma_points,
    symmetrize,
    wrap_angle,
    wrap_residual,
)

logger = logging.getLogger(__name__)

TAU, PHI, THETA, DTAU, DPHI, DTHETA = range(6)
TRACKER_LAYOUT = (Tag.CLOCK_OFFSET, Tag.ANGLE, Tag.ANGLE, Tag.LINEAR, Tag.LINEAR, Tag.LINEAR)
# (theta, phi, tau) order of the fusion measurement rows
OUTPUT_ORDER = [THETA, PHI, TAU]
_FD_FLOOR = np.array([1e-12, 1e-6, 1e-6])
_GRAM_RIDGE = 1e-12


@dataclass(frozen=True)
class TrackerTuning:
    sigma_tau: float = 1e-8
    sigma_phi: float = 0.5
    sigma_theta: float = 0.5
    ut: UtParams = field(default_factory=lambda: UtParams(alpha=1.0, beta=2.0, kappa=-3.0, lambda_override=24.0))
    gn_iters: int = 3
    filter: FilterKind = FilterKind.UKF
    tau_rate_std: float = 1e-4
    angle_rate_std: float = 1.0
    coarse_toa_std: float = 100e-9
    low_power_ratio: float = 0.2
    divergence_probability: float = 0.999
    divergence_epochs: int = 3
    noise_floor: float = 1e-12

    def __post_init__(self):
        if self.gn_iters < 1:
            raise ValueError(f"gn_iters must be >= 1, got {self.gn_iters}")
        object.__setattr__(self, "filter", FilterKind(self.filter))
        for name in ("sigma_tau", "sigma_phi", "sigma_theta", "tau_rate_std", "angle_rate_std", "coarse_toa_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class TrackerState:
    state: GaussianState
    tuning: TrackerTuning = field(default_factory=TrackerTuning)
    an_id: int = 0
    timestamp: float = 0.0
    last_tau: float = 0.0
    high_nees_count: int = 0
    needs_reinit: bool = False
    low_power: bool = False

    def __post_init__(self):
        if self.state.n != 6:
            raise ValueError(f"tracker state must have dimension 6, got {self.state.n}")
        theta = self.state.mean[THETA]
        if not (-1e-12 <= theta <= np.pi + 1e-12):
            raise ValueError(f"polar angle {theta} outside [0, pi]")

    @property
    def tau(self) -> float:
        return float(self.state.mean[TAU])

    @property
    def phi(self) -> float:
        return float(self.state.mean[PHI])

    @property
    def theta(self) -> float:
        return float(self.state.mean[THETA])


def tracker_transition(dt: float, sigma_tau: float, sigma_phi: float, sigma_theta: float) -> LinearTransition:
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    D = np.diag([sigma_tau ** 2, sigma_phi ** 2, sigma_theta ** 2])
    eye = np.eye(3)
    F = np.block([[eye, dt * eye], [np.zeros((3, 3)), eye]])
    Q = np.block([
        [dt ** 3 / 3.0 * D, dt ** 2 / 2.0 * D],
        [dt ** 2 / 2.0 * D, dt * D],
    ])
    return LinearTransition(F, Q)


def feasible_angles(phi, theta):
    """Map (phi, theta) onto phi in (-pi, pi], theta in [0, pi]; theta beyond a pole reflects with phi + pi."""
    theta = np.mod(np.asarray(theta, dtype=float), 2.0 * np.pi)
    flip = theta > np.pi
    theta = np.where(flip, 2.0 * np.pi - theta, theta)
    phi = wrap_angle(np.asarray(phi, dtype=float) + np.where(flip, np.pi, 0.0))
    return phi, theta, flip


def canonicalize(state: GaussianState) -> GaussianState:
    mean = np.array(state.mean)
    phi, theta, flip = feasible_angles(mean[PHI], mean[THETA])
    mean[PHI], mean[THETA] = float(phi), float(theta)
    cov = state.cov
    if bool(flip):
        mean[DTHETA] = -mean[DTHETA]
        J = np.diag([1.0, 1.0, -1.0, 1.0, 1.0, -1.0])
        cov = J @ cov @ J
    return state.replace(mean=mean, cov=cov)


def _responses(eadf: Eadf, points: np.ndarray) -> np.ndarray:
    """Polarimetric responses B for a stack of states, shape (K, M_AN * M_f, 2)."""
    phi, theta, _ = feasible_angles(points[:, PHI], points[:, THETA])
    A = eadf.angle_responses(phi, theta)
    D = eadf.delay_responses(points[:, TAU])
    K = points.shape[0]
    return (A[:, :, None, :] * D[:, None, :, None]).reshape(K, eadf.n_samples, 2)


def _regularized_inverse(gram: np.ndarray) -> np.ndarray:
    ridge = _GRAM_RIDGE * np.trace(gram, axis1=-2, axis2=-1).real
    return np.linalg.inv(gram + ridge[..., None, None] * np.eye(gram.shape[-1]))


def measurement_map(eadf: Eadf, g: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Stacked-real projection of g onto span B(s) for each state s; (K, 2 * M_AN * M_f)."""
    points = np.atleast_2d(points)
    B = _responses(eadf, points)
    BH = np.conj(np.swapaxes(B, 1, 2))
    weights = np.einsum("kqs,ks->kq", _regularized_inverse(BH @ B), BH @ g)
    fitted = np.einsum("knq,kq->kn", B, weights)
    return np.concatenate([fitted.real, fitted.imag], axis=-1)


def matched_power(eadf: Eadf, g: np.ndarray, phi, theta, taus) -> np.ndarray:
    """
    g^H B (B^H B)^-1 B^H g on the product grid (taus x angle pairs), shape (T, K).

    Uses the separable structure of B: the delay part is contracted first
    against the (M_AN, M_f) reshaped snapshot.
    """
    A = eadf.angle_responses(phi, theta)
    D = eadf.delay_responses(taus)
    Gm = np.asarray(g, dtype=complex).reshape(eadf.n_ports, eadf.n_subcarriers)
    z = np.conj(D) @ Gm.T
    r = np.einsum("kpq,tp->tkq", np.conj(A), z)
    gram_inv = _regularized_inverse(np.conj(np.swapaxes(A, 1, 2)) @ A)
    d2 = np.sum(np.abs(D) ** 2, axis=1)
    power = np.einsum("tkq,kqs,tks->tk", np.conj(r), gram_inv, r).real
    return power / d2[:, None]


def default_grids(eadf: Eadf, n_tau: int = 76, n_phi: int = 72, n_theta: int = 36):
    """Delay grid over one period; azimuth over the full circle; polar angle at cell centres."""
    tau_grid = eadf.delay_period * np.arange(n_tau) / n_tau
    phi_grid = wrap_angle(2.0 * np.pi * np.arange(n_phi) / n_phi)
    theta_grid = np.pi * (np.arange(n_theta) + 0.5) / n_theta
    return tau_grid, (phi_grid, theta_grid)


def _cell(grid: np.ndarray, span: float) -> float:
    if grid.size < 2:
        return span
    steps = np.abs(np.diff(np.sort(grid)))
    steps = steps[steps > 0]
    return float(np.min(steps)) if steps.size else span


def _resolve_period(tau: float, coarse: Optional[float], period: float) -> float:
    if coarse is None:
        return tau
    return tau + period * np.round((coarse - tau) / period)


def init_tracker(
    snapshot: ChannelSnapshot,
    eadf: Eadf,
    tau_grid: Optional[np.ndarray] = None,
    angle_grid: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    tuning: TrackerTuning = TrackerTuning(),
) -> TrackerState:
    """Grid search of the matched power; the coarse ToA, when present, picks the delay period."""
    if tau_grid is None or angle_grid is None:
        default_tau, default_angles = default_grids(eadf)
        tau_grid = default_tau if tau_grid is None else tau_grid
        angle_grid = default_angles if angle_grid is None else angle_grid
    tau_grid = np.atleast_1d(np.asarray(tau_grid, dtype=float))
    phi_grid = np.atleast_1d(np.asarray(angle_grid[0], dtype=float))
    theta_grid = np.atleast_1d(np.asarray(angle_grid[1], dtype=float))
    if tau_grid.size == 0 or phi_grid.size == 0 or theta_grid.size == 0:
        raise ValueError("initialization grids must not be empty")
    g = snapshot.g
    energy = float(np.vdot(g, g).real)
    if energy == 0.0:
        raise ValueError("cannot initialize from an all-zero snapshot")

    TH, PH = np.meshgrid(theta_grid, phi_grid, indexing="ij")
    power = matched_power(eadf, g, PH.ravel(), TH.ravel(), tau_grid)
    t_idx, k_idx = np.unravel_index(np.argmax(power), power.shape)
    ratio = float(power[t_idx, k_idx] / energy)
    tau = _resolve_period(float(tau_grid[t_idx]), snapshot.coarse_toa, eadf.delay_period)
    phi, theta, _ = feasible_angles(PH.ravel()[k_idx], TH.ravel()[k_idx])

    cells = np.array([
        _cell(tau_grid, eadf.delay_period),
        _cell(phi_grid, 2.0 * np.pi),
        _cell(theta_grid, np.pi),
    ])
    variances = np.concatenate([cells ** 2 / 12.0, [tuning.tau_rate_std ** 2, tuning.angle_rate_std ** 2, tuning.angle_rate_std ** 2]])
    mean = np.array([tau, float(phi), float(theta), 0.0, 0.0, 0.0])
    low_power = ratio < tuning.low_power_ratio
    logger.info(json.dumps({
        "event": "tracker_init",
        "an_id": snapshot.an_id,
        "tau": tau,
        "phi": float(phi),
        "theta": float(theta),
        "power_ratio": ratio,
    }))
    if low_power:
        logger.warning(json.dumps({"event": "tracker_low_power", "an_id": snapshot.an_id, "power_ratio": ratio}))
    return TrackerState(
        state=GaussianState(mean, np.diag(variances), TRACKER_LAYOUT),
        tuning=tuning,
        an_id=snapshot.an_id,
        timestamp=snapshot.timestamp,
        last_tau=tau,
        low_power=low_power,
    )


def _reacquire(prior: GaussianState, snapshot: ChannelSnapshot, eadf: Eadf, tuning: TrackerTuning,
               last_tau: float, dt: float) -> Optional[GaussianState]:
    """Local delay search at the predicted angles when the delay prediction is no longer trusted."""
    tau_pred = prior.mean[TAU]
    sigma_tau = float(np.sqrt(max(prior.cov[TAU, TAU], 0.0)))
    resolution = 1.0 / (4.0 * eadf.n_subcarriers * eadf.subcarrier_spacing)
    coarse = snapshot.coarse_toa
    disagrees = coarse is not None and abs(tau_pred - coarse) > 4.0 * tuning.coarse_toa_std + 3.0 * sigma_tau
    if sigma_tau <= resolution and not disagrees:
        return None
    if coarse is not None:
        center, half = coarse, 4.0 * tuning.coarse_toa_std
    else:
        center, half = tau_pred, min(4.0 * sigma_tau, eadf.delay_period / 2.0)
    step = eadf.delay_period / (8.0 * eadf.n_subcarriers)
    taus = np.arange(center - half, center + half + step / 2.0, step)
    phi, theta, _ = feasible_angles(prior.mean[PHI], prior.mean[THETA])
    power = matched_power(eadf, snapshot.g, [float(phi)], [float(theta)], taus)[:, 0]
    tau_new = float(taus[np.argmax(power)])

    mean = np.array(prior.mean)
    cov = np.array(prior.cov)
    mean[TAU] = tau_new
    cov[TAU, :] = cov[:, TAU] = 0.0
    cov[TAU, TAU] = step ** 2
    if dt > 0:
        mean[DTAU] = (tau_new - last_tau) / dt
        cov[DTAU, :] = cov[:, DTAU] = 0.0
        cov[DTAU, DTAU] = 2.0 * step ** 2 / dt ** 2
    logger.debug(json.dumps({
        "event": "tracker_reacquire",
        "an_id": snapshot.an_id,
        "tau_predicted": float(tau_pred),
        "tau": tau_new,
    }))
    return prior.replace(mean=mean, cov=cov)


def _linearize(eadf: Eadf, g: np.ndarray, iterate: GaussianState, tuning: TrackerTuning) -> np.ndarray:
    """Jacobian of the measurement map at the iterate, shape (2N, 6)."""
    n = iterate.n
    if tuning.filter is FilterKind.EKF:
        rates = iterate.mean[3:]
        steps = np.maximum(1e-3 * iterate.std[:3], _FD_FLOOR)
        J3 = numerical_jacobian(lambda s: measurement_map(eadf, g, np.concatenate([s, rates]))[0], iterate.mean[:3], steps)
        return np.hstack([J3, np.zeros((J3.shape[0], n - 3))])
    sigmas = sigma_points(iterate, tuning.ut)
    spread = np.sqrt(n + tuning.ut.lam(n))
    root = (sigmas.points[1:n + 1] - sigmas.points[0]).T / spread
    Y = measurement_map(eadf, g, sigmas.points)
    Z = (Y[1:n + 1] - Y[n + 1:]).T / (2.0 * spread)
    # H L = Z, with L the square root the sigma points were drawn from
    return linalg.solve_triangular(root.T, Z.T, lower=False, check_finite=False).T


def _information_step(prior: GaussianState, H: np.ndarray, r: float, innovation: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gauss-Newton step (P^-1 + H^T H / r)^-1 in normalized square-root form; returns (mean, cov).

    With C = L L^T the correlation of the prior, the normalized posterior is
    L (I + L^T M L)^-1 L^T, assembled as W W^T so it stays PSD however large
    the information gets.
    """
    d = np.sqrt(np.clip(np.diag(prior.cov), 0.0, None))
    d = np.where(d > 0, d, 1.0)
    L = cholesky_sqrt(prior.cov / np.outer(d, d))
    Hn = H * d
    HL = Hn @ L
    s, V = np.linalg.eigh(np.eye(prior.n) + HL.T @ HL / r)
    W = L @ (V / np.sqrt(s))
    post_n = symmetrize(W @ W.T)
    mean = prior.mean + d * (post_n @ (Hn.T @ innovation)) / r
    cov = symmetrize(post_n * np.outer(d, d))
    return mean, cov


def tracker_step(
    ts: TrackerState,
    snapshot: ChannelSnapshot,
    eadf: Eadf,
    dt: float,
) -> Tuple[TrackerState, Tuple[float, float, float], np.ndarray]:
    """Predict, re-acquire the delay if needed, run the iterated update.

    Returns the new state, the estimate (phi, theta, tau) and its 3x3
    covariance in (theta, phi, tau) order.
    """
    tuning = ts.tuning
    model = tracker_transition(dt, tuning.sigma_tau, tuning.sigma_phi, tuning.sigma_theta)
    prior = canonicalize(predict_linear(ts.state, model))
    reacquired = _reacquire(prior, snapshot, eadf, tuning, ts.last_tau, dt)
    if reacquired is not None:
        prior = reacquired

    g = snapshot.g
    y = np.concatenate([g.real, g.imag])
    r = max(snapshot.noise_var / 2.0, tuning.noise_floor * float(np.vdot(g, g).real) / g.size)
    if r <= 0.0:
        r = tuning.noise_floor

    iterate = prior
    for _ in range(tuning.gn_iters):
        H = _linearize(eadf, g, iterate, tuning)
        offset = wrap_residual(prior.mean - iterate.mean, TRACKER_LAYOUT)
        innovation = y - measurement_map(eadf, g, iterate.mean)[0] - H @ offset
        mean, cov = _information_step(prior, H, r, innovation)
        iterate = GaussianState(wrap_residual(mean, TRACKER_LAYOUT), cov, TRACKER_LAYOUT)
    posterior = canonicalize(iterate)

    residual = y - measurement_map(eadf, g, posterior.mean)[0]
    fit = float(residual @ residual) / r
    threshold = chi2.ppf(tuning.divergence_probability, max(y.size - 7, 1))
    count = ts.high_nees_count + 1 if fit > threshold else 0
    needs_reinit = count >= tuning.divergence_epochs
    if needs_reinit and not ts.needs_reinit:
        logger.warning(json.dumps({"event": "tracker_divergence", "an_id": ts.an_id, "fit": fit, "epochs": count}))

    new_state = TrackerState(
        state=posterior,
        tuning=tuning,
        an_id=ts.an_id,
        timestamp=ts.timestamp + dt,
        last_tau=float(posterior.mean[TAU]),
        high_nees_count=count,
        needs_reinit=needs_reinit,
        low_power=ts.low_power,
    )
    estimate = (float(posterior.mean[PHI]), float(posterior.mean[THETA]), float(posterior.mean[TAU]))
    R_hat = symmetrize(posterior.cov[np.ix_(OUTPUT_ORDER, OUTPUT_ORDER)])
    return new_state, estimate, R_hat


def track_snapshots(snapshots: Sequence[ChannelSnapshot], eadf: Eadf, tuning: TrackerTuning = TrackerTuning()):
    """Run one tracker over a snapshot sequence, re-initializing when flagged; yields (state, estimate, R_hat)."""
    ts = None
    for snap in snapshots:
        if ts is None or ts.needs_reinit:
            ts = init_tracker(snap, eadf, tuning=tuning)
            yield ts, (ts.phi, ts.theta, ts.tau), symmetrize(ts.state.cov[np.ix_(OUTPUT_ORDER, OUTPUT_ORDER)])
            continue
        ts, estimate, R_hat = tracker_step(ts, snap, eadf, snap.timestamp - ts.timestamp)
        yield ts, estimate, R_hat
