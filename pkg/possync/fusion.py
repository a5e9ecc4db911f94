"""
Central fusion of per-AN DoA/ToA measurements into UN position, velocity and clock.

Two schemes share the code path:
  * pos_clock: ANs synchronized to the reference, state [p, v, rho_UN, alpha] (n = 8)
  * pos_sync:  phase-locked ANs, state augmented with one offset per LoS AN (n = 8 + L)

Either runs as a UKF or an EKF, fusing (elevation, azimuth, ToA) per AN or
the angles only.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import block_diag

from possync.clock import clock_process_blocks
from possync.errors import ConfigError, SingularGeometry
from possync.filter_core import (
    GaussianState,
    LinearTransition,
    Tag,
    UtParams,
    ekf_update,
    marginalize,
    predict_linear,
    symmetrize,
    ukf_update,
    wrap_angle,
)

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
POSITION_GUARD = 1e-6

POS = slice(0, 3)
VEL = slice(3, 6)
RHO_UN = 6
SKEW = 7
BASE_DIM = 8
BASE_LAYOUT = (Tag.LINEAR,) * 6 + (Tag.CLOCK_OFFSET, Tag.CLOCK_SKEW)
MEASUREMENT_LAYOUT = (Tag.ANGLE, Tag.ANGLE, Tag.LINEAR)


class Scheme(str, Enum):
    POS_CLOCK = "pos_clock"
    POS_SYNC = "pos_sync"


class FilterKind(str, Enum):
    UKF = "ukf"
    EKF = "ekf"


class MeasurementSet(str, Enum):
    DOA_TOA = "doa_toa"
    DOA_ONLY = "doa_only"


@dataclass(frozen=True)
class FusionMode:
    scheme: Scheme = Scheme.POS_CLOCK
    filter: FilterKind = FilterKind.UKF
    measurements: MeasurementSet = MeasurementSet.DOA_TOA

    @property
    def key(self) -> str:
        return f"{self.scheme.value}-{self.filter.value}-{self.measurements.value}"

    @property
    def rows(self) -> Tuple[int, ...]:
        return (0, 1, 2) if self.measurements is MeasurementSet.DOA_TOA else (0, 1)

    @classmethod
    def parse(cls, key: str) -> "FusionMode":
        try:
            scheme, kind, meas = key.strip().split("-")
            return cls(Scheme(scheme), FilterKind(kind), MeasurementSet(meas))
        except ValueError:
            raise ConfigError(f"unknown filter mode {key!r}", [("modes", f"unknown mode {key!r}")])


ALL_MODES = tuple(
    FusionMode(s, f, m) for s in Scheme for f in FilterKind for m in MeasurementSet
)


@dataclass(frozen=True)
class EpochMeasurement:
    """(elevation, azimuth, ToA) from one AN, with its 3x3 covariance."""

    an_id: int
    y: np.ndarray
    R: np.ndarray
    timestamp: float

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        R = np.asarray(self.R, dtype=float)
        if y.shape != (3,) or R.shape != (3, 3):
            raise ValueError(f"measurement must be 3-vector with 3x3 covariance, got {y.shape}, {R.shape}")
        if not np.allclose(R, R.T, rtol=1e-12, atol=0.0):
            raise ValueError("measurement covariance is not symmetric")
        trace = np.trace(R)
        if np.linalg.eigvalsh(R).min() < -1e-10 * max(trace, 0.0):
            raise ValueError("measurement covariance is not positive semidefinite")
        y.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "R", R)


def measurement_from_tracker(
    an_id: int,
    phi: float,
    theta_polar: float,
    tau: float,
    cov_polar: np.ndarray,
    timestamp: float,
) -> EpochMeasurement:
    """Convert a stage-1 estimate (polar theta, covariance in (theta, phi, tau) order) to elevation form."""
    flip = np.diag([-1.0, 1.0, 1.0])
    R = symmetrize(flip @ np.asarray(cov_polar, dtype=float) @ flip)
    y = np.array([np.pi / 2.0 - theta_polar, wrap_angle(phi), tau])
    return EpochMeasurement(an_id, y, R, timestamp)


@dataclass(frozen=True)
class FusionParams:
    sigma_v: float = 3.5
    sigma_eta: float = 1e-4
    sigma_rho: float = 1e-9
    ut: UtParams = field(default_factory=lambda: UtParams(alpha=1e-3, beta=2.0, kappa=0.0))


@dataclass(frozen=True)
class FusionPrior:
    velocity_std: float = 5.0
    offset_std: float = 100e-6
    skew_mean: float = 25e-6
    skew_std: float = 30e-6
    an_offset_std: float = 100e-6
    position_var_floor: float = 100.0


@dataclass(frozen=True)
class FusionState:
    state: GaussianState
    mode: FusionMode
    an_registry: Tuple[int, ...] = ()
    timestamp: Optional[float] = None
    reference_an: Optional[int] = None

    def __post_init__(self):
        registry = tuple(int(a) for a in self.an_registry)
        if self.mode.scheme is Scheme.POS_CLOCK and registry:
            raise ValueError("pos_clock states carry no AN offset slots")
        if len(set(registry)) != len(registry):
            raise ValueError(f"duplicate AN ids in registry {registry}")
        if self.reference_an is not None and self.reference_an in registry:
            raise ValueError("the reference AN never carries an offset slot")
        expected = BASE_DIM + len(registry)
        if self.state.n != expected:
            raise ValueError(f"state dimension {self.state.n} does not match mode/registry ({expected})")
        object.__setattr__(self, "an_registry", registry)

    def slot_index(self, an_id: int) -> Optional[int]:
        if an_id in self.an_registry:
            return BASE_DIM + self.an_registry.index(an_id)
        return None

    @property
    def position(self) -> np.ndarray:
        return self.state.mean[POS]

    @property
    def velocity(self) -> np.ndarray:
        return self.state.mean[VEL]

    @property
    def clock_offset(self) -> float:
        return float(self.state.mean[RHO_UN])

    @property
    def skew(self) -> float:
        return float(self.state.mean[SKEW])

    @property
    def an_offsets(self) -> Dict[int, float]:
        return {a: float(self.state.mean[BASE_DIM + i]) for i, a in enumerate(self.an_registry)}


def fusion_transition(mode: FusionMode, dt: float, sigma_v: float, sigma_eta: float, sigma_rho: float, L: int) -> LinearTransition:
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    L = L if mode.scheme is Scheme.POS_SYNC else 0
    eye = np.eye(3)
    F_cv = np.block([[eye, dt * eye], [np.zeros((3, 3)), eye]])
    Q_cv = sigma_v ** 2 * np.block([
        [dt ** 3 / 3.0 * eye, dt ** 2 / 2.0 * eye],
        [dt ** 2 / 2.0 * eye, dt * eye],
    ])
    F_clock = np.array([[1.0, dt], [0.0, 1.0]])
    Q_clock, Q_rho = clock_process_blocks(dt, sigma_eta, sigma_rho, L)
    F_blocks, Q_blocks = [F_cv, F_clock], [Q_cv, Q_clock]
    if L:
        F_blocks.append(np.eye(L))
        Q_blocks.append(Q_rho)
    return LinearTransition(block_diag(*F_blocks), block_diag(*Q_blocks))


def observables(un_position, an_position, rho_un=0.0, rho_an=0.0) -> np.ndarray:
    """Geometric measurement model, vectorized over leading axes: (..., 3) as (elevation, azimuth, ToA)."""
    delta = np.asarray(un_position, dtype=float) - np.asarray(an_position, dtype=float)
    dx, dy, dz = delta[..., 0], delta[..., 1], delta[..., 2]
    r2 = np.hypot(dx, dy)
    r3 = np.hypot(r2, dz)
    if np.any(r3 < POSITION_GUARD):
        raise SingularGeometry("UN coincides with the AN; azimuth is undefined")
    theta = np.arctan2(dz, r2)
    phi = np.arctan2(dy, dx)
    tau = r3 / SPEED_OF_LIGHT + (np.asarray(rho_an, dtype=float) - np.asarray(rho_un, dtype=float))
    return np.stack(np.broadcast_arrays(theta, phi, tau), axis=-1)


def predict_measurement(state, an_position, an_slot: Optional[int], mode: FusionMode) -> np.ndarray:
    """h for one AN. `state` is a FusionState, a mean vector, or a (N, n) stack of vectors."""
    mean = state.state.mean if isinstance(state, FusionState) else np.asarray(state, dtype=float)
    if mode.scheme is Scheme.POS_SYNC and an_slot is not None:
        rho_an = mean[..., an_slot]
    else:
        rho_an = 0.0
    return observables(mean[..., POS], an_position, mean[..., RHO_UN], rho_an)


def measurement_jacobian(state, an_position, an_slot: Optional[int], mode: FusionMode) -> np.ndarray:
    mean = state.state.mean if isinstance(state, FusionState) else np.asarray(state, dtype=float)
    delta = mean[POS] - np.asarray(an_position, dtype=float)
    dx, dy, dz = delta
    r2_sq = dx * dx + dy * dy
    r2 = np.sqrt(r2_sq)
    r3_sq = r2_sq + dz * dz
    r3 = np.sqrt(r3_sq)
    if r3 < POSITION_GUARD:
        raise SingularGeometry("UN coincides with the AN; azimuth is undefined")
    if r2 < POSITION_GUARD:
        raise SingularGeometry("UN is directly above or below the AN; elevation derivative is undefined")
    J = np.zeros((3, mean.size))
    J[0, 0] = -dx * dz / (r2 * r3_sq)
    J[0, 1] = -dy * dz / (r2 * r3_sq)
    J[0, 2] = r2 / r3_sq
    J[1, 0] = -dy / r2_sq
    J[1, 1] = dx / r2_sq
    J[2, POS] = delta / (SPEED_OF_LIGHT * r3)
    J[2, RHO_UN] = -1.0
    if mode.scheme is Scheme.POS_SYNC and an_slot is not None:
        J[2, an_slot] = 1.0
    return J


def init_position_cl(los_an_positions: Sequence, variance_floor: float = 100.0) -> Tuple[np.ndarray, np.ndarray]:
    """Centroid of the LoS ANs; isotropic variance from the farthest AN, floored at (10 m)^2 by default."""
    positions = np.atleast_2d(np.asarray(los_an_positions, dtype=float))
    if positions.size == 0:
        raise ValueError("centroid initialization needs at least one LoS AN")
    p0 = positions.mean(axis=0)
    var = max(float(np.max(np.sum((positions - p0) ** 2, axis=1))), variance_floor)
    return p0, var * np.eye(3)


def init_fusion(
    mode: FusionMode,
    cl_fragment: Tuple[np.ndarray, np.ndarray],
    prior: FusionPrior = FusionPrior(),
    an_ids: Sequence[int] = (),
    timestamp: Optional[float] = None,
    reference_an: Optional[int] = None,
) -> FusionState:
    p0, cov_p = cl_fragment
    an_ids = tuple(an_ids) if mode.scheme is Scheme.POS_SYNC else ()
    if reference_an is not None and reference_an in an_ids:
        raise ValueError("the reference AN never carries an offset slot")
    L = len(an_ids)
    mean = np.concatenate([p0, np.zeros(3), [0.0, prior.skew_mean], np.zeros(L)])
    blocks = [
        np.asarray(cov_p, dtype=float),
        prior.velocity_std ** 2 * np.eye(3),
        np.diag([prior.offset_std ** 2, prior.skew_std ** 2]),
    ]
    if L:
        blocks.append(prior.an_offset_std ** 2 * np.eye(L))
    layout = BASE_LAYOUT + (Tag.CLOCK_OFFSET,) * L
    state = GaussianState(mean, block_diag(*blocks), layout)
    return FusionState(state, mode, an_ids, timestamp, reference_an)


def manage_an_set(fs: FusionState, new_los_an_ids: Sequence[int], an_offset_std: float = 100e-6) -> FusionState:
    """Drop departed AN slots (marginalize) and append arrivals with the offset prior."""
    new_ids = [int(a) for a in new_los_an_ids]
    if fs.reference_an is not None and fs.reference_an in new_ids:
        raise ValueError(f"AN {fs.reference_an} is the reference and cannot carry an offset slot")
    if fs.mode.scheme is Scheme.POS_CLOCK:
        return fs
    kept = [a for a in fs.an_registry if a in new_ids]
    arrivals = [a for a in new_ids if a not in fs.an_registry]
    if len(kept) == len(fs.an_registry) and not arrivals:
        return fs
    departed = [a for a in fs.an_registry if a not in new_ids]
    keep_idx = list(range(BASE_DIM)) + [fs.slot_index(a) for a in kept]
    state = marginalize(fs.state, keep_idx)
    if arrivals:
        k = len(arrivals)
        mean = np.concatenate([state.mean, np.zeros(k)])
        cov = block_diag(state.cov, an_offset_std ** 2 * np.eye(k))
        state = GaussianState(mean, cov, state.layout + (Tag.CLOCK_OFFSET,) * k)
    logger.debug(json.dumps({"event": "an_set_change", "arrived": arrivals, "departed": departed}))
    return FusionState(state, fs.mode, tuple(kept + arrivals), fs.timestamp, fs.reference_an)


def _stacked_model(fs: FusionState, measurements: Sequence[EpochMeasurement], an_positions: Mapping[int, np.ndarray]):
    rows = list(fs.mode.rows)
    entries = []
    for m in measurements:
        if m.an_id not in an_positions:
            raise ValueError(f"no position known for AN {m.an_id}")
        slot = fs.slot_index(m.an_id)
        if fs.mode.scheme is Scheme.POS_SYNC and slot is None and m.an_id != fs.reference_an:
            raise ValueError(f"AN {m.an_id} has no offset slot; call manage_an_set first")
        entries.append((np.asarray(an_positions[m.an_id], dtype=float), slot))

    def h(points):
        parts = [predict_measurement(points, pos, slot, fs.mode)[..., rows] for pos, slot in entries]
        return np.concatenate(parts, axis=-1)

    def jac(mean):
        return np.vstack([measurement_jacobian(mean, pos, slot, fs.mode)[rows] for pos, slot in entries])

    y = np.concatenate([m.y[rows] for m in measurements])
    R = block_diag(*[m.R[np.ix_(rows, rows)] for m in measurements])
    layout = tuple(MEASUREMENT_LAYOUT[r] for r in rows) * len(measurements)
    return y, R, h, jac, layout


def fuse_epoch(
    fs: FusionState,
    measurements: Sequence[EpochMeasurement],
    an_positions: Mapping[int, np.ndarray],
    dt: float,
    params: FusionParams = FusionParams(),
) -> FusionState:
    """One linear predict over dt, then a single stacked update with all measurements."""
    for m in measurements:
        if fs.timestamp is not None and m.timestamp < fs.timestamp:
            raise ValueError(f"out-of-order measurement at t={m.timestamp} (filter at t={fs.timestamp})")
    state = fs.state
    if dt > 0:
        model = fusion_transition(fs.mode, dt, params.sigma_v, params.sigma_eta, params.sigma_rho, len(fs.an_registry))
        state = predict_linear(state, model)
    elif dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    if measurements:
        timestamp = max(m.timestamp for m in measurements)
    else:
        timestamp = None if fs.timestamp is None else fs.timestamp + dt
    predicted = FusionState(state, fs.mode, fs.an_registry, timestamp, fs.reference_an)
    if not measurements:
        return predicted

    y, R, h, jac, layout = _stacked_model(predicted, measurements, an_positions)
    if fs.mode.filter is FilterKind.UKF:
        state = ukf_update(state, y, h, R, params.ut, layout, vectorized=True)
    else:
        state = ekf_update(state, y, lambda m: h(m[None, :])[0], jac, R, layout)
    return FusionState(state, fs.mode, fs.an_registry, timestamp, fs.reference_an)
