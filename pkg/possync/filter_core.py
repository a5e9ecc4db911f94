"""
Gaussian filtering machinery shared by both estimation stages.

Covers linear prediction, the unscented transform (weights and sigma points),
the UKF and EKF measurement updates and angle-aware residuals. All functions
return new GaussianState values; nothing here holds state between calls.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from possync.errors import NumericalFailure

logger = logging.getLogger(__name__)

JITTER_SCALE = 1e-12
MAX_JITTER_ATTEMPTS = 6
# values this close above -pi are snapped to +pi so the output interval stays (-pi, pi]
_WRAP_SNAP = 1e-12


class Tag(str, Enum):
    """Per-index meaning of a state or residual component."""

    LINEAR = "linear"
    ANGLE = "angle"
    CLOCK_OFFSET = "clock_offset"
    CLOCK_SKEW = "clock_skew"


Layout = Tuple[Tag, ...]


def wrap_angle(x):
    """Map radians to (-pi, pi]. Accepts scalars and arrays."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"cannot wrap non-finite angle {x!r}")
    w = np.mod(arr + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi + _WRAP_SNAP, np.pi, w)
    if np.ndim(x) == 0:
        return float(w)
    return w


def wrap_residual(values: np.ndarray, layout: Optional[Sequence[Tag]]) -> np.ndarray:
    """Wrap the components tagged ANGLE along the last axis; others pass through."""
    out = np.array(values, dtype=float)
    if layout is None:
        return out
    idx = [i for i, tag in enumerate(layout) if Tag(tag) is Tag.ANGLE]
    if idx:
        out[..., idx] = wrap_angle(out[..., idx])
    return out


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


@dataclass(frozen=True)
class GaussianState:
    """Mean, covariance and a per-index layout tag."""

    mean: np.ndarray
    cov: np.ndarray
    layout: Layout

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        n = mean.size
        if cov.shape != (n, n):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {n}")
        layout = tuple(Tag(t) for t in self.layout)
        if len(layout) != n:
            raise ValueError(f"layout has {len(layout)} tags for a state of dimension {n}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("state contains non-finite values")
        scale = float(np.max(np.abs(cov))) if n else 0.0
        if n and np.max(np.abs(cov - cov.T)) > 1e-12 * max(scale, np.finfo(float).tiny):
            raise ValueError("covariance is not symmetric")
        trace = float(np.trace(cov)) if n else 0.0
        if n and trace > 0 and np.linalg.eigvalsh(cov).min() < -1e-10 * trace:
            raise ValueError("covariance is not positive semidefinite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "layout", layout)

    @property
    def n(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def replace(self, mean=None, cov=None) -> "GaussianState":
        return GaussianState(
            self.mean if mean is None else mean,
            self.cov if cov is None else cov,
            self.layout,
        )


@dataclass(frozen=True)
class UtParams:
    """Unscented-transform spread parameters. `lambda_override` replaces the derived lambda."""

    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    lambda_override: Optional[float] = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    def lam(self, n: int) -> float:
        if self.lambda_override is not None:
            return float(self.lambda_override)
        return self.alpha ** 2 * (n + self.kappa) - n


@dataclass(frozen=True)
class SigmaPointSet:
    points: np.ndarray
    weights_mean: np.ndarray
    weights_cov: np.ndarray


@dataclass(frozen=True)
class LinearTransition:
    F: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        F = np.atleast_2d(np.array(self.F, dtype=float))
        Q = np.atleast_2d(np.array(self.Q, dtype=float))
        if F.shape[0] != F.shape[1] or F.shape != Q.shape:
            raise ValueError(f"transition shapes disagree: F {F.shape}, Q {Q.shape}")
        if not np.allclose(Q, Q.T, rtol=0.0, atol=1e-12 * max(np.max(np.abs(Q)), 1e-300)):
            raise ValueError("process noise Q is not symmetric")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "Q", Q)


def ut_weights(n: int, params: UtParams) -> Tuple[np.ndarray, np.ndarray]:
    if n < 1:
        raise ValueError(f"state dimension must be >= 1, got {n}")
    lam = params.lam(n)
    denom = n + lam
    if denom == 0.0 or not np.isfinite(denom):
        raise ValueError(f"n + lambda = {denom} (n={n}, lambda={lam}); weights undefined")
    if denom < 0.0:
        raise ValueError(f"n + lambda = {denom} is negative; sigma-point spread undefined")
    wm = np.full(2 * n + 1, 1.0 / (2.0 * denom))
    wc = wm.copy()
    wm[0] = lam / denom
    wc[0] = lam / denom + (1.0 - params.alpha ** 2 + params.beta)
    return wm, wc


def cholesky_sqrt(cov: np.ndarray) -> np.ndarray:
    """
    Lower Cholesky factor of a PSD matrix.

    Factorizes the diagonally normalized matrix and rescales, so the jitter
    (1e-12 * trace, doubled up to MAX_JITTER_ATTEMPTS times) is relative to
    every component regardless of its unit.
    """
    cov = symmetrize(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    d = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if not np.any(d > 0):
        return np.zeros_like(cov)
    d = np.where(d > 0, d, 1.0)
    corr = cov / np.outer(d, d)
    try:
        return d[:, None] * linalg.cholesky(corr, lower=True)
    except linalg.LinAlgError:
        pass
    jitter = JITTER_SCALE * float(np.trace(corr))
    for attempt in range(1, MAX_JITTER_ATTEMPTS + 1):
        try:
            factor = linalg.cholesky(corr + jitter * np.eye(n), lower=True)
            logger.debug(json.dumps({"event": "cholesky_jitter", "attempt": attempt, "jitter": jitter}))
            return d[:, None] * factor
        except linalg.LinAlgError:
            jitter *= 2.0
    raise NumericalFailure(
        f"Cholesky factorization failed after {MAX_JITTER_ATTEMPTS} jitter attempts",
        condition=float(np.linalg.cond(corr)),
    )


def solve_spd(S: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Return S^-1 B for a symmetric positive definite S, or raise NumericalFailure."""
    S = symmetrize(np.asarray(S, dtype=float))
    B = np.asarray(B, dtype=float)
    diag = np.diag(S)
    if not (np.all(np.isfinite(S)) and np.all(diag > 0)):
        raise NumericalFailure("covariance has a non-finite or non-positive diagonal", condition=None)
    if not np.all(np.isfinite(B)):
        raise NumericalFailure("right-hand side is not finite", condition=None)
    d = np.sqrt(diag)
    Sn = S / np.outer(d, d)
    try:
        factor = linalg.cho_factor(Sn, lower=True)
    except (linalg.LinAlgError, ValueError):
        raise NumericalFailure("covariance is not positive definite", condition=float(np.linalg.cond(Sn)))
    scaled = B / (d[:, None] if B.ndim == 2 else d)
    x = linalg.cho_solve(factor, scaled)
    return x / (d[:, None] if B.ndim == 2 else d)


def clamp_psd(cov: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """
    Symmetrize cov and clip negative eigenvalues to zero.

    The eigen-decomposition is taken in the frame normalized by `scale`
    (typically the prior variances), so a component in seconds is clipped on
    the same footing as one in meters.
    """
    cov = symmetrize(np.asarray(cov, dtype=float))
    d = np.sqrt(np.clip(np.asarray(scale, dtype=float), 0.0, None))
    d = np.where(d > 0, d, 1.0)
    corr = cov / np.outer(d, d)
    w, V = np.linalg.eigh(corr)
    if w.min() >= 0.0:
        return cov
    logger.debug(json.dumps({"event": "covariance_clamped", "min_eigenvalue": float(w.min())}))
    corr = (V * np.clip(w, 0.0, None)) @ V.T
    return symmetrize(corr * np.outer(d, d))


def sigma_points(state: GaussianState, params: UtParams) -> SigmaPointSet:
    n = state.n
    wm, wc = ut_weights(n, params)
    root = cholesky_sqrt(state.cov)
    offsets = np.sqrt(n + params.lam(n)) * root.T
    points = np.vstack([state.mean, state.mean + offsets, state.mean - offsets])
    return SigmaPointSet(points, wm, wc)


def predict_linear(state: GaussianState, model: LinearTransition) -> GaussianState:
    if model.F.shape != (state.n, state.n):
        raise ValueError(f"transition is {model.F.shape}, state dimension is {state.n}")
    mean = wrap_residual(model.F @ state.mean, state.layout)
    cov = symmetrize(model.F @ state.cov @ model.F.T + model.Q)
    return GaussianState(mean, cov, state.layout)


def propagate(points: np.ndarray, fn: Callable, vectorized: bool = False) -> np.ndarray:
    if vectorized:
        out = np.asarray(fn(points), dtype=float)
        return out.reshape(points.shape[0], -1)
    return np.array([np.atleast_1d(np.asarray(fn(p), dtype=float)) for p in points])


def unscented_transform(
    sigmas: SigmaPointSet,
    fn: Callable,
    residual_layout: Optional[Sequence[Tag]] = None,
    vectorized: bool = False,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Push sigma points through `fn`; return (mean, covariance, deviations).

    Deviations are taken relative to the image of the centre point and
    wrapped per `residual_layout` before weighting.
    """
    Y = propagate(sigmas.points, fn, vectorized)
    d0 = wrap_residual(Y - Y[0], residual_layout)
    shift = sigmas.weights_mean @ d0
    mean = wrap_residual(Y[0] + shift, residual_layout)
    dev = d0 - shift
    cov = symmetrize((dev.T * sigmas.weights_cov) @ dev)
    return mean, cov, dev


def _state_deviations(sigmas: SigmaPointSet) -> np.ndarray:
    dx = sigmas.points - sigmas.points[0]
    return dx - sigmas.weights_mean @ dx


def kalman_correct(prior: GaussianState, cross: np.ndarray, S: np.ndarray, innovation: np.ndarray) -> GaussianState:
    """Apply K = C S^-1 with the given innovation; covariance P - K S K^T."""
    gain = solve_spd(S, cross.T).T
    mean = wrap_residual(prior.mean + gain @ innovation, prior.layout)
    cov = clamp_psd(prior.cov - gain @ S @ gain.T, np.diag(prior.cov))
    return GaussianState(mean, cov, prior.layout)


def ukf_update(
    prior: GaussianState,
    y: np.ndarray,
    h: Callable,
    R: np.ndarray,
    params: UtParams,
    residual_layout: Optional[Sequence[Tag]] = None,
    vectorized: bool = False,
) -> GaussianState:
    sigmas = sigma_points(prior, params)
    mu, Pyy, dev = unscented_transform(sigmas, h, residual_layout, vectorized)
    S = symmetrize(Pyy + np.atleast_2d(R))
    cross = (_state_deviations(sigmas).T * sigmas.weights_cov) @ dev
    innovation = wrap_residual(np.asarray(y, dtype=float) - mu, residual_layout)
    return kalman_correct(prior, cross, S, innovation)


def ekf_update(
    prior: GaussianState,
    y: np.ndarray,
    h: Callable,
    jacobian_of_h: Callable,
    R: np.ndarray,
    residual_layout: Optional[Sequence[Tag]] = None,
) -> GaussianState:
    m = np.array(prior.mean)
    H = np.atleast_2d(np.asarray(jacobian_of_h(m), dtype=float))
    S = symmetrize(H @ prior.cov @ H.T + np.atleast_2d(R))
    cross = prior.cov @ H.T
    innovation = wrap_residual(np.asarray(y, dtype=float) - np.asarray(h(m), dtype=float), residual_layout)
    return kalman_correct(prior, cross, S, innovation)


def numerical_jacobian(
    fn: Callable,
    x: np.ndarray,
    steps: Union[float, Sequence[float]] = 1e-6,
    residual_layout: Optional[Sequence[Tag]] = None,
) -> np.ndarray:
    """Central finite differences of fn at x."""
    x = np.asarray(x, dtype=float)
    steps = np.broadcast_to(np.asarray(steps, dtype=float), x.shape)
    columns = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = steps[i]
        diff = np.asarray(fn(x + e), dtype=float) - np.asarray(fn(x - e), dtype=float)
        columns.append(wrap_residual(diff, residual_layout) / (2.0 * steps[i]))
    return np.column_stack(columns)


def nees(state: GaussianState, truth: np.ndarray) -> float:
    """Normalized estimation error squared; NaN when the covariance cannot be inverted."""
    err = wrap_residual(np.asarray(truth, dtype=float) - state.mean, state.layout)
    try:
        return float(err @ solve_spd(state.cov, err))
    except NumericalFailure as e:
        logger.debug(json.dumps({"event": "nees_undefined", "reason": str(e)}))
        return float("nan")


def marginalize(state: GaussianState, keep: Sequence[int]) -> GaussianState:
    keep = list(keep)
    return GaussianState(
        state.mean[keep],
        state.cov[np.ix_(keep, keep)],
        tuple(state.layout[i] for i in keep),
    )
