"""
Ground-truth world: AN grid, UN trajectories, truth clocks, LoS selection and
measurement generation (direct noisy observables or channel snapshots).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from possync.array_channel import (
    ChannelSnapshot,
    Eadf,
    cylindrical_array,
    eadf_from_json,
    generate_snapshot,
    polarimetric_response,
    snr_noise_variance,
    synthesize_eadf,
)
from possync.clock import ClockState, ClockTruthParams, draw_clock, step_clock
from possync.config import ChannelConfig, ScenarioConfig, central_an, grid_shape
from possync.errors import ConfigError
from possync.fusion import SPEED_OF_LIGHT, EpochMeasurement, observables

logger = logging.getLogger(__name__)

# R floor for direct measurements with zero configured noise (3 cm in range)
MIN_ANGLE_STD = 1e-5
MIN_TOA_STD = 1e-10
_SUBSTEPS = 10
_CLIMB_RATE = 3.0
# trajectory legs end this far inside the area; turns run at most this speed
LEG_MARGIN = 10.0
TURN_SPEED = 5.0


@dataclass(frozen=True)
class AnNode:
    id: int
    position: np.ndarray
    clock: ClockState = field(default_factory=lambda: ClockState(0.0, 0.0))
    is_reference: bool = False
    eadf: Optional[Eadf] = None


def build_network(
    spacing: float = 50.0,
    extent: Tuple[float, float] = (100.0, 100.0),
    height: float = 7.0,
    reference_an: Optional[int] = None,
    an_offset_std: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    eadf: Optional[Eadf] = None,
) -> List[AnNode]:
    """
    Rectangular grid, ids row-major from 0. The reference defaults to the AN
    nearest the grid center. Non-reference ANs get constant offsets when
    an_offset_std > 0.
    """
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    n_x, n_y = grid_shape(spacing, extent)
    xs = spacing * np.arange(n_x)
    ys = spacing * np.arange(n_y)
    count = n_x * n_y
    if reference_an is None:
        reference_an = central_an(n_x, n_y)
    if not 0 <= reference_an < count:
        raise ValueError(f"reference AN {reference_an} not in a grid of {count} ANs")
    if an_offset_std > 0 and rng is None:
        raise ValueError("an rng is required to draw AN clock offsets")
    nodes = []
    for i, (y, x) in enumerate((y, x) for y in ys for x in xs):
        offset = 0.0
        if an_offset_std > 0:
            draw = an_offset_std * rng.standard_normal()
            offset = 0.0 if i == reference_an else float(draw)
        nodes.append(AnNode(i, np.array([x, y, height]), ClockState(offset, 0.0), i == reference_an, eadf))
    return nodes


@dataclass(frozen=True)
class Trajectory:
    kind: str
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    duration: float
    seed: int


@dataclass(frozen=True)
class _Segment:
    start: float
    duration: float
    heading: float
    turn_rate: float = 0.0
    speeds: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    climb: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    grounded: bool = False


def _trapezoid(t, duration, profile, accel):
    v0, vc, v1 = profile
    t_up = abs(vc - v0) / accel
    t_down = abs(vc - v1) / accel
    if t < t_up:
        return v0 + np.sign(vc - v0) * accel * t
    if t > duration - t_down:
        return v1 + np.sign(vc - v1) * accel * (duration - t)
    return vc


def _ramp_time(profile, accel) -> float:
    v0, vc, v1 = profile
    return (abs(vc - v0) + abs(vc - v1)) / accel


def _displacement(seg: _Segment, accel: float, steps: int = 200) -> np.ndarray:
    h = seg.duration / steps
    ts = seg.start + (np.arange(steps) + 0.5) * h
    return h * np.sum([_velocity(seg, t, accel) for t in ts], axis=0)


class _Planner:
    """
    Draws segments until the duration is covered.

    Straight legs are shortened so they end LEG_MARGIN inside `area`, and turns
    head back toward the center with lateral acceleration at most `accel`, so
    the UN stays over the AN grid.
    """

    def __init__(self, kind: str, v_max: float, accel: float, max_altitude: float, ground: float, rng, center, start, area):
        self.kind, self.v_max, self.accel = kind, v_max, accel
        self.max_altitude, self.ground = max_altitude, ground
        self.rng, self.center = rng, np.asarray(center, dtype=float)
        self.area = np.asarray(area, dtype=float)
        self.segments: List[_Segment] = []
        self.t = 0.0
        self.speed = 0.0
        self.heading = float(rng.uniform(-np.pi, np.pi))
        self.position = np.array(start, dtype=float)

    def add(self, duration, turn_rate=0.0, speeds=(0.0, 0.0, 0.0), climb=(0.0, 0.0, 0.0), grounded=False):
        duration = max(duration, _ramp_time(speeds, self.accel), _ramp_time(climb, self.accel))
        seg = _Segment(self.t, duration, self.heading, turn_rate, tuple(speeds), tuple(climb), grounded)
        self.segments.append(seg)
        self.t += duration
        self.heading += turn_rate * duration
        self.speed = speeds[2]
        self.position += _displacement(seg, self.accel)

    def room(self) -> float:
        """Distance along the heading before the margin of the area is reached."""
        lo = self.area[:2] + LEG_MARGIN
        hi = self.area[2:] - LEG_MARGIN
        direction = np.array([np.cos(self.heading), np.sin(self.heading)])
        p = self.position[:2]
        room = np.inf
        for k in range(2):
            if direction[k] > 1e-9:
                room = min(room, (hi[k] - p[k]) / direction[k])
            elif direction[k] < -1e-9:
                room = min(room, (lo[k] - p[k]) / direction[k])
        return max(float(room), 0.0)

    def halt(self, grounded=False):
        self.add(float(self.rng.uniform(1.0, 3.0)), grounded=grounded)

    def leg(self, stop: bool):
        v0 = self.speed
        cruise = float(self.rng.uniform(0.5, 1.0)) * self.v_max
        end = 0.0 if stop else min(cruise, TURN_SPEED)
        room = self.room()
        # v0 -> cruise -> end covers at least (2 cruise^2 - v0^2 - end^2) / (2 accel)
        cruise = min(cruise, float(np.sqrt(self.accel * room + 0.5 * (v0 ** 2 + end ** 2))))
        end = min(end, cruise)
        drawn = float(self.rng.uniform(4.0, 10.0))
        if cruise < 1e-6:
            self.add(1.0)
            return
        ramp = (abs(cruise ** 2 - v0 ** 2) + abs(cruise ** 2 - end ** 2)) / (2.0 * self.accel)
        duration = min(drawn, _ramp_time((v0, cruise, end), self.accel) + max(room - ramp, 0.0) / cruise)
        self.add(duration, speeds=(v0, cruise, end))

    def turn(self):
        to_center = self.center[:2] - self.position[:2]
        bearing = float(np.arctan2(to_center[1], to_center[0]))
        angle = float(np.angle(np.exp(1j * (bearing - self.heading + self.rng.uniform(-np.pi / 8.0, np.pi / 8.0)))))
        v = self.speed
        duration = max(float(self.rng.uniform(2.0, 4.0)), abs(angle) * v / self.accel)
        self.add(duration, turn_rate=angle / duration, speeds=(v, v, v))

    def vertical(self, target: float):
        dz = target - self.position[2]
        if abs(dz) < 1e-9:
            return
        rate = min(_CLIMB_RATE, self.v_max, np.sqrt(abs(dz) * self.accel))
        w = np.sign(dz) * rate
        duration = abs(dz) / rate + rate / self.accel
        self.add(duration, climb=(0.0, w, 0.0))
        self.position[2] = target

    def plan(self, duration: float):
        if self.kind == "static":
            self.add(duration, grounded=self.position[2] <= self.ground)
            return
        while self.t < duration:
            if self.kind == "drone":
                self.halt(grounded=self.position[2] <= self.ground + 1e-9)
                altitude = float(self.rng.uniform(0.25, 1.0)) * self.max_altitude + self.ground
                self.vertical(altitude)
                self.leg(stop=False)
                self.turn()
                self.leg(stop=True)
                self.vertical(self.ground)
            else:
                stop = self.rng.random() < 0.3
                self.leg(stop=stop)
                if stop:
                    self.halt()
                else:
                    self.turn()


def _velocity(seg: _Segment, t: float, accel: float) -> np.ndarray:
    local = t - seg.start
    speed = _trapezoid(local, seg.duration, seg.speeds, accel)
    heading = seg.heading + seg.turn_rate * local
    vz = _trapezoid(local, seg.duration, seg.climb, accel)
    return np.array([speed * np.cos(heading), speed * np.sin(heading), vz])


def gen_trajectory(
    kind: str,
    duration: float,
    dt: float,
    v_max: float,
    seed: int,
    accel: float = 2.0,
    start: Optional[Sequence[float]] = None,
    center: Sequence[float] = (50.0, 50.0),
    ground_height: float = 1.5,
    max_altitude: float = 40.0,
    area: Optional[Sequence[float]] = None,
) -> Trajectory:
    """
    Piecewise trapezoidal speed profiles capped at v_max. Vehicles alternate
    straight legs with turns or stops at constant height; drones cycle through
    ground halt, climb, two legs and a landing.

    `area` is (x_min, y_min, x_max, y_max) the legs stay inside, 100 m around
    `center` by default.
    """
    if kind not in ("vehicle", "drone", "static"):
        raise ConfigError(f"unknown trajectory kind {kind!r}", [("trajectory.kind", f"unknown kind {kind!r}")])
    if not (duration > 0 and dt > 0 and v_max > 0 and accel > 0):
        raise ValueError("duration, dt, v_max and accel must be positive")
    rng = np.random.default_rng(seed)
    if start is None:
        start = (center[0] + rng.uniform(-20.0, 20.0), center[1] + rng.uniform(-20.0, 20.0), ground_height)
    if area is None:
        area = (center[0] - 50.0, center[1] - 50.0, center[0] + 50.0, center[1] + 50.0)
    planner = _Planner(kind, v_max, accel, max_altitude, ground_height, rng, center, start, area)
    planner.plan(duration)
    segments = planner.segments
    bounds = np.array([s.start + s.duration for s in segments])

    n_epochs = int(round(duration / dt))
    times = dt * np.arange(n_epochs)
    h = dt / _SUBSTEPS
    positions = np.empty((n_epochs, 3))
    velocities = np.empty((n_epochs, 3))
    p = np.array(start, dtype=float)
    for k, t in enumerate(times):
        seg = segments[min(int(np.searchsorted(bounds, t, side="right")), len(segments) - 1)]
        if seg.grounded:
            p[2] = ground_height
        positions[k] = p
        velocities[k] = _velocity(seg, t, accel)
        for j in range(_SUBSTEPS):
            tm = t + (j + 0.5) * h
            sm = segments[min(int(np.searchsorted(bounds, tm, side="right")), len(segments) - 1)]
            p = p + h * _velocity(sm, tm, accel)
        if kind == "vehicle" or kind == "static":
            p[2] = positions[0, 2]
        else:
            p[2] = max(p[2], ground_height)

    speed = np.linalg.norm(velocities, axis=1)
    over = speed > v_max
    if np.any(over):
        velocities[over] *= (v_max / speed[over])[:, None]
    return Trajectory(kind, times, positions, velocities, float(duration), int(seed))


def select_los(un_position, nodes: Sequence[AnNode], L: int) -> List[int]:
    """The L nearest ANs by 3D distance, ties to the lower id. L beyond the AN count returns all."""
    ids = np.array([n.id for n in nodes])
    dist = np.linalg.norm(np.array([n.position for n in nodes]) - np.asarray(un_position, dtype=float), axis=1)
    order = np.lexsort((ids, dist))
    return [int(i) for i in ids[order][:L]]


def true_observables(un_position, an: AnNode, un_clock: ClockState, an_clock: Optional[ClockState] = None) -> np.ndarray:
    an_clock = an.clock if an_clock is None else an_clock
    return observables(un_position, an.position, un_clock.offset, an_clock.offset)


@dataclass(frozen=True)
class DirectNoise:
    sigma_theta: float = np.deg2rad(1.0)
    sigma_phi: float = np.deg2rad(1.0)
    sigma_tau: float = 3e-9

    def __post_init__(self):
        if min(self.sigma_theta, self.sigma_phi, self.sigma_tau) < 0:
            raise ValueError("measurement standard deviations must be non-negative")


@dataclass(frozen=True)
class ChannelNoise:
    snr_db: float = 20.0
    coarse_toa_std: float = 100e-9

    def __post_init__(self):
        if self.coarse_toa_std < 0:
            raise ValueError("coarse ToA standard deviation must be non-negative")


@dataclass
class World:
    """Mutable truth: trajectory cursor plus the UN clock, stepped once per epoch."""

    nodes: List[AnNode]
    trajectory: Trajectory
    un_clock: ClockState
    clock_params: ClockTruthParams
    dt: float
    los_count: int = 2
    epoch: int = 0

    @property
    def time(self) -> float:
        return float(self.trajectory.times[self.epoch])

    @property
    def un_position(self) -> np.ndarray:
        return self.trajectory.positions[self.epoch]

    @property
    def un_velocity(self) -> np.ndarray:
        return self.trajectory.velocities[self.epoch]

    @property
    def n_epochs(self) -> int:
        return self.trajectory.times.size

    @property
    def reference(self) -> AnNode:
        return next(n for n in self.nodes if n.is_reference)

    def node(self, an_id: int) -> AnNode:
        return self.nodes[an_id]

    def los(self) -> List[int]:
        return select_los(self.un_position, self.nodes, self.los_count)

    def advance(self, rng: np.random.Generator):
        self.un_clock = step_clock(self.un_clock, self.dt, self.clock_params, rng)
        self.epoch += 1


def emit_epoch(
    world: World,
    mode: str,
    noise: Union[DirectNoise, ChannelNoise],
    rng: np.random.Generator,
) -> List[Union[EpochMeasurement, ChannelSnapshot]]:
    """Measurements of the current epoch from every LoS AN, in LoS order."""
    if mode not in ("direct", "channel"):
        raise ValueError(f"unknown measurement mode {mode!r}")
    outputs = []
    for an_id in world.los():
        node = world.node(an_id)
        theta, phi, tau = true_observables(world.un_position, node, world.un_clock)
        if mode == "direct":
            std = np.array([noise.sigma_theta, noise.sigma_phi, noise.sigma_tau])
            y = np.array([theta, phi, tau]) + std * rng.standard_normal(3)
            floor = np.array([MIN_ANGLE_STD, MIN_ANGLE_STD, MIN_TOA_STD])
            R = np.diag(np.maximum(std, floor) ** 2)
            outputs.append(EpochMeasurement(an_id, y, R, world.time))
        else:
            if node.eadf is None:
                raise ValueError(f"AN {an_id} has no EADF for channel mode")
            gamma = (rng.standard_normal(2) + 1j * rng.standard_normal(2)) / 2.0
            theta_polar = np.pi / 2.0 - theta
            signal = polarimetric_response(node.eadf, theta_polar, phi, tau) @ gamma
            noise_var = snr_noise_variance(signal, noise.snr_db)
            coarse = tau + noise.coarse_toa_std * rng.standard_normal()
            outputs.append(generate_snapshot(
                node.eadf, theta_polar, phi, tau, gamma, noise_var, rng,
                an_id=an_id, timestamp=world.time, coarse_toa=float(coarse),
            ))
    return outputs


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    time: float
    los: Tuple[int, ...]
    outputs: Tuple[Union[EpochMeasurement, ChannelSnapshot], ...]
    position: np.ndarray
    velocity: np.ndarray
    un_clock: ClockState
    an_offsets: Dict[int, float]
    truth: Dict[int, np.ndarray]


def simulate(world: World, mode: str, noise, rng: np.random.Generator) -> List[EpochRecord]:
    """Run the world to the end of its trajectory; one record per epoch."""
    records = []
    while True:
        los = tuple(world.los())
        truth = {a: true_observables(world.un_position, world.node(a), world.un_clock) for a in los}
        outputs = tuple(emit_epoch(world, mode, noise, rng))
        records.append(EpochRecord(
            epoch=world.epoch,
            time=world.time,
            los=los,
            outputs=outputs,
            position=np.array(world.un_position),
            velocity=np.array(world.un_velocity),
            un_clock=world.un_clock,
            an_offsets={a: world.node(a).clock.offset for a in los},
            truth=truth,
        ))
        if world.epoch + 1 >= world.n_epochs:
            break
        world.advance(rng)
    return records


def truth_frame(records: Sequence[EpochRecord]) -> pd.DataFrame:
    """Long-format truth: one row per (epoch, LoS AN)."""
    rows = []
    for rec in records:
        for rank, an_id in enumerate(rec.los):
            theta, phi, tau = rec.truth[an_id]
            rows.append({
                "epoch": rec.epoch,
                "t": rec.time,
                "x": rec.position[0], "y": rec.position[1], "z": rec.position[2],
                "vx": rec.velocity[0], "vy": rec.velocity[1], "vz": rec.velocity[2],
                "rho_un": rec.un_clock.offset,
                "skew_un": rec.un_clock.skew,
                "los_rank": rank,
                "an_id": an_id,
                "rho_an": rec.an_offsets[an_id],
                "theta": theta, "phi": phi, "tau": tau,
                "propagation_delay": tau - rec.an_offsets[an_id] + rec.un_clock.offset,
            })
    return pd.DataFrame(rows)


def _output_bytes(item) -> bytes:
    if isinstance(item, EpochMeasurement):
        header = json.dumps({"an_id": item.an_id, "t": repr(item.timestamp)}).encode()
        return header + item.y.tobytes() + item.R.tobytes()
    header = json.dumps({
        "an_id": item.an_id,
        "t": repr(item.timestamp),
        "noise_var": repr(item.noise_var),
        "coarse_toa": repr(item.coarse_toa),
    }).encode()
    return header + item.g.tobytes()


def stream_digest(epochs: Sequence[Sequence]) -> str:
    """sha256 over a per-epoch sequence of measurements or snapshots."""
    digest = hashlib.sha256()
    for k, items in enumerate(epochs):
        digest.update(f"epoch:{k}:{len(items)};".encode())
        for item in items:
            digest.update(_output_bytes(item))
    return digest.hexdigest()


def build_eadf(channel: ChannelConfig) -> Eadf:
    if channel.eadf_file:
        try:
            with open(channel.eadf_file, "r", encoding="utf-8") as f:
                return eadf_from_json(json.load(f))
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise ConfigError(f"cannot load EADF from {channel.eadf_file}", [("channel.eadf_file", str(e))])
    wavelength = SPEED_OF_LIGHT / channel.carrier_hz
    geom = cylindrical_array(wavelength, n_dipoles=channel.n_dipoles)
    if channel.pattern != geom.pattern:
        geom = dataclasses.replace(geom, pattern=channel.pattern)
    return synthesize_eadf(
        geom,
        channel.modes_azimuth,
        channel.modes_elevation,
        channel.grid_azimuth,
        channel.grid_elevation,
        channel.subcarrier_spacing,
        channel.n_subcarriers,
    )


def replication_streams(seed: int, replication: int) -> Dict[str, np.random.Generator]:
    """Independent generators per concern, derived from (seed, replication)."""
    children = np.random.SeedSequence([seed, replication]).spawn(3)
    return {
        "network": np.random.default_rng(children[0]),
        "trajectory": np.random.default_rng(children[1]),
        "measurement": np.random.default_rng(children[2]),
    }


def replication_kind(cfg: ScenarioConfig, replication: int) -> str:
    if cfg.trajectory.kind == "mixed":
        return "vehicle" if replication % 2 == 0 else "drone"
    return cfg.trajectory.kind


def build_world(cfg: ScenarioConfig, replication: int, eadf: Optional[Eadf] = None) -> Tuple[World, np.random.Generator]:
    """World for one replication, plus the generator that drives its measurements and clock steps."""
    streams = replication_streams(cfg.seed, replication)
    net = cfg.network
    nodes = build_network(
        net.spacing, (net.extent_x, net.extent_y), net.height, net.reference_id,
        net.truth_an_offset_std, streams["network"], eadf,
    )
    un_clock = draw_clock(cfg.clock.params(), streams["network"])
    traj_cfg = cfg.trajectory
    trajectory = gen_trajectory(
        replication_kind(cfg, replication),
        cfg.duration,
        cfg.dt,
        traj_cfg.v_max,
        int(streams["trajectory"].integers(0, 2 ** 31 - 1)),
        accel=traj_cfg.accel,
        start=traj_cfg.start,
        center=(net.extent_x / 2.0, net.extent_y / 2.0),
        ground_height=traj_cfg.ground_height,
        max_altitude=traj_cfg.max_altitude,
        area=(0.0, 0.0, net.extent_x, net.extent_y),
    )
    world = World(nodes, trajectory, un_clock, cfg.clock.params(), cfg.dt, cfg.los_count)
    logger.debug(json.dumps({
        "event": "world_built",
        "replication": replication,
        "kind": trajectory.kind,
        "n_ans": len(nodes),
        "epochs": world.n_epochs,
    }))
    return world, streams["measurement"]
