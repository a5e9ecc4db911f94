"""Clock offset/skew truth simulation and the clock process-noise blocks of the fusion filters."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class ClockState:
    """Offset rho in seconds, skew alpha dimensionless (25 ppm = 25e-6)."""

    offset: float
    skew: float

    def __post_init__(self):
        if not (np.isfinite(self.offset) and np.isfinite(self.skew)):
            raise ValueError(f"clock state must be finite, got offset={self.offset}, skew={self.skew}")


@dataclass(frozen=True)
class ClockTruthParams:
    # beta slightly below one: the truth model asks |beta| < 1, the evaluation behaves as constant skew
    beta_clock: float = 1.0 - 1e-9
    sigma_eta: float = 6.3e-8
    offset_std: float = 100e-6
    skew_mean: float = 25e-6
    skew_std: float = 30e-6

    def __post_init__(self):
        if self.sigma_eta < 0 or self.offset_std < 0 or self.skew_std < 0:
            raise ValueError("clock standard deviations must be non-negative")
        if abs(self.beta_clock) > 1.0:
            raise ValueError(f"|beta_clock| must not exceed 1, got {self.beta_clock}")


def draw_clock(params: ClockTruthParams, rng: np.random.Generator) -> ClockState:
    offset = params.offset_std * rng.standard_normal()
    skew = params.skew_mean + params.skew_std * rng.standard_normal()
    return ClockState(float(offset), float(skew))


def step_clock(c: ClockState, dt: float, p: ClockTruthParams, rng: np.random.Generator) -> ClockState:
    """Skew first (alpha[k] = beta*alpha[k-1] + eta), then offset with the new skew."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    eta = p.sigma_eta * rng.standard_normal()
    skew = p.beta_clock * c.skew + eta
    return ClockState(c.offset + skew * dt, skew)


def clock_process_blocks(dt: float, sigma_eta: float, sigma_rho: float, L: int) -> Tuple[np.ndarray, np.ndarray]:
    """Return (Q' for [rho_UN, alpha], Q_rho for the L AN offsets)."""
    if sigma_eta < 0 or sigma_rho < 0:
        raise ValueError("standard deviations must be non-negative")
    if L < 0:
        raise ValueError(f"L must be non-negative, got {L}")
    q = sigma_eta ** 2
    q_clock = q * np.array([
        [dt ** 3 / 3.0, dt ** 2 / 2.0],
        [dt ** 2 / 2.0, dt],
    ])
    q_rho = sigma_rho ** 2 * np.eye(L)
    return q_clock, q_rho
