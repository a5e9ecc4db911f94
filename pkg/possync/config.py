"""
Scenario configuration: JSON schema, defaults and resolution into frozen dataclasses.

An empty document resolves to the reference set-up (3x3 grid at 50 m, two
LoS ANs, 100 ms epochs, 50 km/h vehicles, the default filter tuning).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import jsonschema
import numpy as np

from possync.clock import ClockTruthParams
from possync.doa_toa_tracker import TrackerTuning
from possync.errors import ConfigError
from possync.filter_core import UtParams
from possync.fusion import ALL_MODES, FusionMode, FusionParams, FusionPrior

TRAJECTORY_KINDS = ("vehicle", "drone", "mixed", "static")
MEASUREMENT_MODES = ("direct", "channel")


def grid_shape(spacing: float, extent: Tuple[float, float]) -> Tuple[int, int]:
    """AN count along x and y for a grid starting at the origin."""
    return tuple(int(np.floor(e / spacing + 1e-9)) + 1 for e in extent)


def central_an(n_x: int, n_y: int) -> int:
    """Row-major id of the AN nearest the grid center (4 for a 3x3 grid)."""
    return (n_y // 2) * n_x + n_x // 2


@dataclass(frozen=True)
class NetworkConfig:
    spacing: float = 50.0
    extent_x: float = 100.0
    extent_y: float = 100.0
    height: float = 7.0
    reference_an: Optional[int] = None
    truth_an_offset_std: float = 0.0

    @property
    def shape(self) -> Tuple[int, int]:
        return grid_shape(self.spacing, (self.extent_x, self.extent_y))

    @property
    def reference_id(self) -> int:
        """The configured reference AN, else the one nearest the grid center."""
        if self.reference_an is not None:
            return self.reference_an
        return central_an(*self.shape)


@dataclass(frozen=True)
class TrajectoryConfig:
    kind: str = "vehicle"
    v_max_kmh: float = 50.0
    accel: float = 2.0
    ground_height: float = 1.5
    max_altitude: float = 40.0
    start: Optional[Tuple[float, float, float]] = None

    @property
    def v_max(self) -> float:
        return self.v_max_kmh / 3.6


@dataclass(frozen=True)
class ClockTruthConfig:
    beta: float = 1.0 - 1e-9
    sigma_eta: float = 6.3e-8
    offset_std: float = 100e-6
    skew_mean: float = 25e-6
    skew_std: float = 30e-6

    def params(self) -> ClockTruthParams:
        return ClockTruthParams(self.beta, self.sigma_eta, self.offset_std, self.skew_mean, self.skew_std)


@dataclass(frozen=True)
class MeasurementConfig:
    mode: str = "direct"
    sigma_theta_deg: float = 1.0
    sigma_phi_deg: float = 1.0
    sigma_tau: float = 3e-9


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = 20.0
    carrier_hz: float = 3.5e9
    n_dipoles: int = 10
    pattern: str = "dipole"
    subcarrier_spacing: float = 240e3
    n_subcarriers: int = 19
    modes_azimuth: int = 17
    modes_elevation: int = 17
    grid_azimuth: int = 48
    grid_elevation: int = 48
    coarse_toa_std: float = 100e-9
    eadf_file: Optional[str] = None


@dataclass(frozen=True)
class Stage1Config:
    filter: str = "ukf"
    sigma_tau: float = 1e-8
    sigma_phi: float = 0.5
    sigma_theta: float = 0.5
    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = -3.0
    lambda_override: Optional[float] = 24.0
    gn_iters: int = 3
    n_tau: int = 76
    n_phi: int = 72
    n_theta: int = 36
    low_power_ratio: float = 0.2

    def tuning(self, coarse_toa_std: float = 100e-9) -> TrackerTuning:
        return TrackerTuning(
            sigma_tau=self.sigma_tau,
            sigma_phi=self.sigma_phi,
            sigma_theta=self.sigma_theta,
            ut=UtParams(self.alpha, self.beta, self.kappa, self.lambda_override),
            gn_iters=self.gn_iters,
            filter=self.filter,
            coarse_toa_std=coarse_toa_std,
            low_power_ratio=self.low_power_ratio,
        )


@dataclass(frozen=True)
class FusionConfig:
    sigma_v: float = 3.5
    sigma_eta: float = 1e-4
    sigma_rho: float = 1e-9
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    velocity_std: float = 5.0
    offset_std: float = 100e-6
    skew_mean: float = 25e-6
    skew_std: float = 30e-6
    an_offset_std: float = 100e-6
    position_var_floor: float = 100.0
    init: str = "centroid"
    r_source: str = "stage1"

    def params(self) -> FusionParams:
        return FusionParams(self.sigma_v, self.sigma_eta, self.sigma_rho, UtParams(self.alpha, self.beta, self.kappa))

    def prior(self) -> FusionPrior:
        return FusionPrior(
            self.velocity_std, self.offset_std, self.skew_mean, self.skew_std,
            self.an_offset_std, self.position_var_floor,
        )


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    replications: int = 20
    n_jobs: int = 1
    duration: float = 60.0
    dt: float = 0.1
    los_count: int = 2
    warmup: int = 50
    modes: Tuple[str, ...] = tuple(m.key for m in ALL_MODES)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    clock: ClockTruthConfig = field(default_factory=ClockTruthConfig)
    measurement: MeasurementConfig = field(default_factory=MeasurementConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    @property
    def n_epochs(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def fusion_modes(self) -> Tuple[FusionMode, ...]:
        return tuple(FusionMode.parse(m) for m in self.modes)


def _num(minimum=None, exclusive=False):
    schema: Dict[str, Any] = {"type": "number"}
    if minimum is not None:
        schema["exclusiveMinimum" if exclusive else "minimum"] = minimum
    return schema


def _int(minimum=None):
    schema: Dict[str, Any] = {"type": "integer"}
    if minimum is not None:
        schema["minimum"] = minimum
    return schema


def _section(properties: Dict[str, Any]) -> Dict[str, Any]:
    return {"type": "object", "additionalProperties": False, "properties": properties}


CONFIG_SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "possync scenario",
    **_section({
        "seed": _int(0),
        "replications": _int(1),
        "n_jobs": {"type": "integer", "not": {"const": 0}},
        "duration": _num(0, exclusive=True),
        "dt": _num(0, exclusive=True),
        "los_count": _int(1),
        "warmup": _int(0),
        "modes": {
            "type": "array",
            "minItems": 1,
            "uniqueItems": True,
            "items": {"type": "string", "enum": [m.key for m in ALL_MODES]},
        },
        "network": _section({
            "spacing": _num(0, exclusive=True),
            "extent_x": _num(0),
            "extent_y": _num(0),
            "height": {"type": "number"},
            "reference_an": {"type": ["integer", "null"], "minimum": 0},
            "truth_an_offset_std": _num(0),
        }),
        "trajectory": _section({
            "kind": {"type": "string", "enum": list(TRAJECTORY_KINDS)},
            "v_max_kmh": _num(0, exclusive=True),
            "accel": _num(0, exclusive=True),
            "ground_height": {"type": "number"},
            "max_altitude": _num(0, exclusive=True),
            "start": {"type": ["array", "null"], "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        }),
        "clock": _section({
            "beta": {"type": "number", "minimum": -1, "maximum": 1},
            "sigma_eta": _num(0),
            "offset_std": _num(0),
            "skew_mean": {"type": "number"},
            "skew_std": _num(0),
        }),
        "measurement": _section({
            "mode": {"type": "string", "enum": list(MEASUREMENT_MODES)},
            "sigma_theta_deg": _num(0),
            "sigma_phi_deg": _num(0),
            "sigma_tau": _num(0),
        }),
        "channel": _section({
            "snr_db": {"type": "number"},
            "carrier_hz": _num(0, exclusive=True),
            "n_dipoles": _int(2),
            "pattern": {"type": "string", "enum": ["dipole", "isotropic"]},
            "subcarrier_spacing": _num(0, exclusive=True),
            "n_subcarriers": _int(1),
            "modes_azimuth": _int(1),
            "modes_elevation": _int(1),
            "grid_azimuth": _int(1),
            "grid_elevation": _int(1),
            "coarse_toa_std": _num(0),
            "eadf_file": {"type": ["string", "null"]},
        }),
        "stage1": _section({
            "filter": {"type": "string", "enum": ["ukf", "ekf"]},
            "sigma_tau": _num(0),
            "sigma_phi": _num(0),
            "sigma_theta": _num(0),
            "alpha": _num(0, exclusive=True),
            "beta": {"type": "number"},
            "kappa": {"type": "number"},
            "lambda_override": {"type": ["number", "null"]},
            "gn_iters": _int(1),
            "n_tau": _int(1),
            "n_phi": _int(1),
            "n_theta": _int(1),
            "low_power_ratio": {"type": "number", "minimum": 0, "maximum": 1},
        }),
        "fusion": _section({
            "sigma_v": _num(0),
            "sigma_eta": _num(0),
            "sigma_rho": _num(0),
            "alpha": _num(0, exclusive=True),
            "beta": {"type": "number"},
            "kappa": {"type": "number"},
            "velocity_std": _num(0),
            "offset_std": _num(0),
            "skew_mean": {"type": "number"},
            "skew_std": _num(0),
            "an_offset_std": _num(0),
            "position_var_floor": _num(0, exclusive=True),
            "init": {"type": "string", "enum": ["centroid", "truth"]},
            "r_source": {"type": "string", "enum": ["stage1", "configured"]},
        }),
    }),
}

_SECTIONS = {
    "network": NetworkConfig,
    "trajectory": TrajectoryConfig,
    "clock": ClockTruthConfig,
    "measurement": MeasurementConfig,
    "channel": ChannelConfig,
    "stage1": Stage1Config,
    "fusion": FusionConfig,
}


def _dotted(error: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in error.absolute_path)
    return path or "<root>"


def schema_problems(data: Any) -> List[Tuple[str, str]]:
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: [str(p) for p in e.absolute_path])
    return [(_dotted(e), e.message) for e in errors]


def _semantic_problems(cfg: ScenarioConfig) -> List[Tuple[str, str]]:
    problems = []
    if cfg.warmup >= cfg.n_epochs:
        problems.append(("warmup", f"warm-up of {cfg.warmup} epochs leaves nothing of {cfg.n_epochs} epochs"))
    n_x, n_y = cfg.network.shape
    if cfg.network.reference_id >= n_x * n_y:
        problems.append(("network.reference_an", f"grid has only {n_x * n_y} ANs"))
    for name in ("modes_azimuth", "modes_elevation", "n_subcarriers"):
        if getattr(cfg.channel, name) % 2 == 0:
            problems.append((f"channel.{name}", "must be odd"))
    if cfg.channel.grid_azimuth < cfg.channel.modes_azimuth:
        problems.append(("channel.grid_azimuth", "fewer samples than modes"))
    if cfg.channel.grid_elevation < cfg.channel.modes_elevation:
        problems.append(("channel.grid_elevation", "fewer samples than modes"))
    if cfg.stage1.lambda_override is None:
        lam = cfg.stage1.alpha ** 2 * (6 + cfg.stage1.kappa) - 6
    else:
        lam = cfg.stage1.lambda_override
    if 6 + lam <= 0:
        problems.append(("stage1.lambda_override", f"n + lambda = {6 + lam} must be positive"))
    return problems


def resolve(data: Dict[str, Any]) -> ScenarioConfig:
    """Validate a config document and fill in defaults."""
    problems = schema_problems(data)
    if problems:
        raise ConfigError("configuration does not match the schema", problems)
    top = {k: v for k, v in data.items() if k not in _SECTIONS}
    if "modes" in top:
        top["modes"] = tuple(top["modes"])
    sections = {}
    for name, cls in _SECTIONS.items():
        values = dict(data.get(name, {}))
        if values.get("start") is not None:
            values["start"] = tuple(float(v) for v in values["start"])
        sections[name] = cls(**values)
    cfg = ScenarioConfig(**top, **sections)
    problems = _semantic_problems(cfg)
    if problems:
        raise ConfigError("configuration is inconsistent", problems)
    return cfg


def load_config(path: str) -> Tuple[ScenarioConfig, str]:
    """Read, validate and resolve a JSON config file; returns the config and the file's sha256."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}", [("<file>", str(e))])
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"config {path} is not valid JSON", [("<root>", str(e))])
    return resolve(data), hashlib.sha256(raw).hexdigest()


def with_overrides(cfg: ScenarioConfig, seed=None, modes=None, replications=None, n_jobs=None) -> ScenarioConfig:
    """Apply CLI flags on top of a resolved config, re-validating the result."""
    data = to_dict(cfg)
    if seed is not None:
        data["seed"] = seed
    if modes is not None:
        data["modes"] = [m.strip() for m in modes.split(",") if m.strip()] if isinstance(modes, str) else list(modes)
    if replications is not None:
        data["replications"] = replications
    if n_jobs is not None:
        data["n_jobs"] = n_jobs
    return resolve(data)


def to_dict(cfg: ScenarioConfig) -> Dict[str, Any]:
    data = dataclasses.asdict(cfg)
    data["modes"] = list(cfg.modes)
    start = data["trajectory"]["start"]
    data["trajectory"]["start"] = None if start is None else list(start)
    return data
