"""
Synthetic multiantenna-multicarrier channel.

Array geometry, EADF synthesis from ideal element models, steering vectors,
the polarimetric response B(theta, phi, tau) and noisy snapshot generation.

Angles: phi is azimuth from +x toward +y, theta is the polar angle from +z.
The arrival direction u(phi, theta) points from the array toward the source.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from possync.errors import ConfigError

EADF_SCHEMA_VERSION = 1


def _symmetric_indices(count: int, name: str) -> np.ndarray:
    if int(count) != count or count < 1 or count % 2 == 0:
        raise ConfigError(f"{name} must be a positive odd integer, got {count}", [(name, "must be a positive odd integer")])
    half = (int(count) - 1) // 2
    return np.arange(-half, half + 1)


def delay_steering(tau: float, n_subcarriers: int, subcarrier_spacing: float) -> np.ndarray:
    m = _symmetric_indices(n_subcarriers, "n_subcarriers")
    return np.exp(1j * 2.0 * np.pi * m * subcarrier_spacing * tau)


def angle_steering(phi: float, theta: float, modes_azimuth: int, modes_elevation: int) -> np.ndarray:
    """d(theta) kron d(phi); index e * modes_azimuth + a."""
    m_a = _symmetric_indices(modes_azimuth, "modes_azimuth")
    m_e = _symmetric_indices(modes_elevation, "modes_elevation")
    return np.kron(np.exp(1j * m_e * theta), np.exp(1j * m_a * phi))


def _direction_basis(phi, theta):
    phi = np.asarray(phi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    sp, cp, st, ct = np.sin(phi), np.cos(phi), np.sin(theta), np.cos(theta)
    u = np.stack([st * cp, st * sp, ct], axis=-1)
    e_theta = np.stack([ct * cp, ct * sp, -st], axis=-1)
    e_phi = np.stack([-sp, cp, np.zeros_like(phi)], axis=-1)
    return u, e_theta, e_phi


def _dipole_pattern(orientations, e_pol):
    return e_pol @ orientations.T


def _isotropic_pattern(orientations, e_pol):
    return np.ones(e_pol.shape[:-1] + (orientations.shape[0],))


PATTERNS = {
    "dipole": _dipole_pattern,
    "isotropic": _isotropic_pattern,
}


@dataclass(frozen=True)
class ArrayGeometry:
    """Port positions (m) and dipole orientations (unit vectors), one row per port."""

    positions: np.ndarray
    orientations: np.ndarray
    wavelength: float
    pattern: str = "dipole"

    def __post_init__(self):
        positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        orientations = np.atleast_2d(np.asarray(self.orientations, dtype=float))
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValueError(f"positions must be (M, 3), got {positions.shape}")
        if positions.shape[0] < 2:
            raise ValueError(f"an array needs at least 2 ports, got {positions.shape[0]}")
        if orientations.shape != positions.shape:
            raise ValueError("orientations must match positions")
        if not np.all(np.isfinite(positions)):
            raise ValueError("port positions must be finite")
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be positive, got {self.wavelength}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown element pattern {self.pattern!r}; known: {sorted(PATTERNS)}")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "orientations", orientations)

    @property
    def n_ports(self) -> int:
        return self.positions.shape[0]


def cylindrical_array(
    wavelength: float,
    n_dipoles: int = 10,
    radius: Optional[float] = None,
    heights: Sequence[float] = None,
) -> ArrayGeometry:
    """Cross-dipoles on two rings (radius wavelength/2, heights 0 and wavelength/4), slanted +-45 deg."""
    radius = wavelength / 2.0 if radius is None else radius
    heights = (0.0, wavelength / 4.0) if heights is None else tuple(heights)
    per_ring = n_dipoles // len(heights)
    if per_ring * len(heights) != n_dipoles:
        raise ValueError(f"{n_dipoles} dipoles cannot be split evenly over {len(heights)} rings")
    positions, orientations = [], []
    z_axis = np.array([0.0, 0.0, 1.0])
    for ring, height in enumerate(heights):
        for i in range(per_ring):
            psi = 2.0 * np.pi * i / per_ring + ring * np.pi / per_ring
            tangent = np.array([-np.sin(psi), np.cos(psi), 0.0])
            position = [radius * np.cos(psi), radius * np.sin(psi), height]
            for sign in (1.0, -1.0):
                positions.append(position)
                orientations.append((z_axis + sign * tangent) / np.sqrt(2.0))
    return ArrayGeometry(np.array(positions), np.array(orientations), wavelength)


def element_response(geom: ArrayGeometry, phi, theta) -> np.ndarray:
    """Ideal per-port responses, shape (..., M, 2): column 0 H excitation, column 1 V excitation."""
    u, e_theta, e_phi = _direction_basis(phi, theta)
    phase = np.exp(1j * 2.0 * np.pi / geom.wavelength * (u @ geom.positions.T))
    pattern = PATTERNS[geom.pattern]
    amp_h = pattern(geom.orientations, e_phi)
    amp_v = pattern(geom.orientations, e_theta)
    return np.stack([amp_h * phase, amp_v * phase], axis=-1)


@dataclass(frozen=True)
class Eadf:
    G_H: np.ndarray
    G_V: np.ndarray
    G_f: np.ndarray
    modes_azimuth: int
    modes_elevation: int
    subcarrier_spacing: float
    n_subcarriers: int

    def __post_init__(self):
        _symmetric_indices(self.modes_azimuth, "modes_azimuth")
        _symmetric_indices(self.modes_elevation, "modes_elevation")
        _symmetric_indices(self.n_subcarriers, "n_subcarriers")
        n_modes = self.modes_azimuth * self.modes_elevation
        G_H = np.asarray(self.G_H, dtype=complex)
        G_V = np.asarray(self.G_V, dtype=complex)
        G_f = np.asarray(self.G_f, dtype=complex)
        if G_H.ndim != 2 or G_H.shape[1] != n_modes or G_V.shape != G_H.shape:
            raise ValueError(f"G_H/G_V must be (M_AN, {n_modes}), got {G_H.shape}, {G_V.shape}")
        if G_f.shape != (self.n_subcarriers, self.n_subcarriers):
            raise ValueError(f"G_f must be ({self.n_subcarriers}, {self.n_subcarriers}), got {G_f.shape}")
        if not self.subcarrier_spacing > 0:
            raise ValueError("subcarrier_spacing must be positive")
        object.__setattr__(self, "G_H", G_H)
        object.__setattr__(self, "G_V", G_V)
        object.__setattr__(self, "G_f", G_f)

    @property
    def n_ports(self) -> int:
        return self.G_H.shape[0]

    @property
    def n_samples(self) -> int:
        return self.n_ports * self.n_subcarriers

    @property
    def delay_period(self) -> float:
        return 1.0 / self.subcarrier_spacing

    def angle_responses(self, phi, theta) -> np.ndarray:
        """Per-port H/V responses for arrays of angles, shape (K, M_AN, 2)."""
        m_a = _symmetric_indices(self.modes_azimuth, "modes_azimuth")
        m_e = _symmetric_indices(self.modes_elevation, "modes_elevation")
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        d = (np.exp(1j * np.outer(theta, m_e))[:, :, None] * np.exp(1j * np.outer(phi, m_a))[:, None, :])
        d = d.reshape(phi.size, -1)
        return np.stack([d @ self.G_H.T, d @ self.G_V.T], axis=-1)

    def delay_responses(self, taus) -> np.ndarray:
        """G_f d(tau) for an array of delays, shape (T, M_f)."""
        m = _symmetric_indices(self.n_subcarriers, "n_subcarriers")
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        return np.exp(1j * 2.0 * np.pi * self.subcarrier_spacing * np.outer(taus, m)) @ self.G_f.T


def synthesize_eadf(
    geom: ArrayGeometry,
    modes_azimuth: int,
    modes_elevation: int,
    grid_azimuth: int,
    grid_elevation: int,
    subcarrier_spacing: float = 240e3,
    n_subcarriers: int = 19,
    G_f: Optional[np.ndarray] = None,
) -> Eadf:
    """
    Sample the ideal responses on a uniform (phi, theta) grid over [0, 2pi)^2 and
    keep the central Fourier modes. Evaluating the closed-form response at
    theta beyond pi gives the periodic extension over the sphere directly.
    """
    m_a = _symmetric_indices(modes_azimuth, "modes_azimuth")
    m_e = _symmetric_indices(modes_elevation, "modes_elevation")
    problems = []
    if grid_azimuth < modes_azimuth:
        problems.append(("grid_azimuth", f"{grid_azimuth} samples alias {modes_azimuth} modes"))
    if grid_elevation < modes_elevation:
        problems.append(("grid_elevation", f"{grid_elevation} samples alias {modes_elevation} modes"))
    if problems:
        raise ConfigError("EADF grid too coarse for the requested mode counts", problems)

    phi = 2.0 * np.pi * np.arange(grid_azimuth) / grid_azimuth
    theta = 2.0 * np.pi * np.arange(grid_elevation) / grid_elevation
    TH, PH = np.meshgrid(theta, phi, indexing="ij")
    samples = element_response(geom, PH, TH)
    coef = np.fft.fft2(samples, axes=(0, 1)) / (grid_azimuth * grid_elevation)
    kept = coef[np.ix_(m_e % grid_elevation, m_a % grid_azimuth)]
    kept = kept.reshape(modes_elevation * modes_azimuth, geom.n_ports, 2)
    G_f = np.eye(n_subcarriers, dtype=complex) if G_f is None else G_f
    return Eadf(
        G_H=kept[:, :, 0].T.copy(),
        G_V=kept[:, :, 1].T.copy(),
        G_f=G_f,
        modes_azimuth=modes_azimuth,
        modes_elevation=modes_elevation,
        subcarrier_spacing=subcarrier_spacing,
        n_subcarriers=n_subcarriers,
    )


def polarimetric_response(eadf: Eadf, theta: float, phi: float, tau: float) -> np.ndarray:
    a = angle_steering(phi, theta, eadf.modes_azimuth, eadf.modes_elevation)
    d = eadf.G_f @ delay_steering(tau, eadf.n_subcarriers, eadf.subcarrier_spacing)
    return np.column_stack([np.kron(eadf.G_H @ a, d), np.kron(eadf.G_V @ a, d)])


@dataclass(frozen=True)
class ChannelSnapshot:
    g: np.ndarray
    noise_var: float
    an_id: int = 0
    timestamp: float = 0.0
    coarse_toa: Optional[float] = None

    def __post_init__(self):
        g = np.asarray(self.g, dtype=complex).reshape(-1)
        if self.noise_var < 0:
            raise ValueError(f"noise variance must be non-negative, got {self.noise_var}")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)


def snr_noise_variance(signal: np.ndarray, snr_db: float) -> float:
    signal = np.asarray(signal)
    return float(np.vdot(signal, signal).real / (signal.size * 10.0 ** (snr_db / 10.0)))


def generate_snapshot(
    eadf: Eadf,
    theta: float,
    phi: float,
    tau: float,
    gamma: np.ndarray,
    noise_var: float,
    rng: np.random.Generator,
    an_id: int = 0,
    timestamp: float = 0.0,
    coarse_toa: Optional[float] = None,
) -> ChannelSnapshot:
    if noise_var < 0:
        raise ValueError(f"noise variance must be non-negative, got {noise_var}")
    signal = polarimetric_response(eadf, theta, phi, tau) @ np.asarray(gamma, dtype=complex)
    noise = np.sqrt(noise_var / 2.0) * (rng.standard_normal(signal.size) + 1j * rng.standard_normal(signal.size))
    return ChannelSnapshot(signal + noise, noise_var, an_id, timestamp, coarse_toa)


def _complex_to_pairs(z: np.ndarray) -> list:
    z = np.asarray(z, dtype=complex)
    return np.stack([z.real, z.imag], axis=-1).tolist()


def _pairs_to_complex(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float)
    return arr[..., 0] + 1j * arr[..., 1]


def eadf_to_json(eadf: Eadf) -> dict:
    """JSON-ready dict; complex entries as [re, im] pairs."""
    return {
        "schema_version": EADF_SCHEMA_VERSION,
        "modes_azimuth": eadf.modes_azimuth,
        "modes_elevation": eadf.modes_elevation,
        "subcarrier_spacing": eadf.subcarrier_spacing,
        "n_subcarriers": eadf.n_subcarriers,
        "G_H": _complex_to_pairs(eadf.G_H),
        "G_V": _complex_to_pairs(eadf.G_V),
        "G_f": _complex_to_pairs(eadf.G_f),
    }


def eadf_from_json(data: dict) -> Eadf:
    version = data.get("schema_version")
    if version != EADF_SCHEMA_VERSION:
        raise ConfigError(f"unsupported EADF schema_version {version!r}", [("schema_version", "unsupported")])
    return Eadf(
        G_H=_pairs_to_complex(data["G_H"]),
        G_V=_pairs_to_complex(data["G_V"]),
        G_f=_pairs_to_complex(data["G_f"]),
        modes_azimuth=int(data["modes_azimuth"]),
        modes_elevation=int(data["modes_elevation"]),
        subcarrier_spacing=float(data["subcarrier_spacing"]),
        n_subcarriers=int(data["n_subcarriers"]),
    )
