"""
Batch evaluation: run the cascade over replications, compute RMSE metrics and
write the run directory (epochs.csv, summary.json, config_echo.json, metrics.prom).
"""
from __future__ import annotations

import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np
import pandas as pd
import scipy
from joblib import Parallel, delayed
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

import possync
from possync.array_channel import Eadf
from possync.config import ScenarioConfig, to_dict
from possync.doa_toa_tracker import OUTPUT_ORDER, TrackerState, default_grids, init_tracker, tracker_step
from possync.errors import OutputError
from possync.filter_core import nees, symmetrize, wrap_angle
from possync.fusion import (
    EpochMeasurement,
    FusionMode,
    FusionState,
    Scheme,
    fuse_epoch,
    init_fusion,
    init_position_cl,
    manage_an_set,
    measurement_from_tracker,
)
from possync.scenario import ChannelNoise, DirectNoise, EpochRecord, build_eadf, build_world, simulate, stream_digest

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BASE_COLUMNS = [
    "schema_version", "replication", "mode", "epoch", "t",
    "x", "y", "z", "x_hat", "y_hat", "z_hat",
    "vx", "vy", "vz", "vx_hat", "vy_hat", "vz_hat",
    "rho_un", "rho_un_hat", "skew", "skew_hat", "nees",
]
SLOT_FIELDS = ["an_id", "rho_an", "rho_an_hat", "theta", "phi", "tau", "theta_hat", "phi_hat", "tau_hat"]


def epoch_columns(los_count: int) -> List[str]:
    """Fixed column order of epochs.csv."""
    return BASE_COLUMNS + [f"{name}_{k}" for k in range(los_count) for name in SLOT_FIELDS]


@dataclass
class RunResult:
    records: pd.DataFrame
    summary: Dict[str, Any]
    config: ScenarioConfig
    digests: List[str]
    telemetry: List[Dict[str, Any]] = field(default_factory=list)


def rmse(truth, estimate, components: Optional[Sequence[int]] = None, warmup: int = 0) -> float:
    """Root of the mean squared Euclidean error over rows from `warmup` on; non-finite rows are skipped."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.ndim == 1:
        truth, estimate = truth[:, None], estimate[:, None]
    if components is not None:
        truth, estimate = truth[:, list(components)], estimate[:, list(components)]
    err2 = np.sum((truth[warmup:] - estimate[warmup:]) ** 2, axis=1)
    err2 = err2[np.isfinite(err2)]
    if err2.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean(err2)))


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _slot_count(records: pd.DataFrame) -> int:
    return sum(1 for c in records.columns if c.startswith("an_id_"))


def _mode_metrics(df: pd.DataFrame, warmup: int) -> Dict[str, Any]:
    post = df[df["epoch"] >= warmup]
    pos = post[["x", "y", "z"]].to_numpy()
    pos_hat = post[["x_hat", "y_hat", "z_hat"]].to_numpy()
    metrics: Dict[str, Any] = {
        "epochs": int(len(post)),
        "rmse_3d": rmse(pos, pos_hat),
        "rmse_2d": rmse(pos, pos_hat, [0, 1]),
        "rmse_z": rmse(pos, pos_hat, [2]),
        "rmse_clock_un_ns": 1e9 * rmse(post["rho_un"], post["rho_un_hat"]),
    }
    slots = range(_slot_count(df))
    an_truth = np.concatenate([post[f"rho_an_{k}"].to_numpy() for k in slots]) if slots else np.array([])
    an_hat = np.concatenate([post[f"rho_an_hat_{k}"].to_numpy() for k in slots]) if slots else np.array([])
    metrics["rmse_clock_an_ns"] = 1e9 * rmse(an_truth, an_hat) if an_truth.size else float("nan")
    nees_values = post["nees"].to_numpy(dtype=float)
    metrics["mean_nees"] = float(np.mean(nees_values[np.isfinite(nees_values)])) if np.any(np.isfinite(nees_values)) else float("nan")

    per_slot = []
    for k in slots:
        dphi = wrap_angle(np.nan_to_num(post[f"phi_hat_{k}"].to_numpy() - post[f"phi_{k}"].to_numpy()))
        valid = np.isfinite(post[f"phi_hat_{k}"].to_numpy())
        per_slot.append({
            "slot": k,
            "rmse_azimuth_deg": float(np.degrees(rmse(np.zeros(int(valid.sum())), dphi[valid]))) if valid.any() else float("nan"),
            "rmse_elevation_deg": float(np.degrees(rmse(post[f"theta_{k}"], post[f"theta_hat_{k}"]))),
            "rmse_toa_ns": 1e9 * rmse(post[f"tau_{k}"], post[f"tau_hat_{k}"]),
        })
    metrics["slots"] = per_slot

    per_rep = [
        (rmse(g[["x", "y", "z"]].to_numpy(), g[["x_hat", "y_hat", "z_hat"]].to_numpy()),
         1e9 * rmse(g["rho_un"], g["rho_un_hat"]))
        for _, g in post.groupby("replication", sort=True)
    ]
    metrics["median_rmse_3d"] = float(np.median([r[0] for r in per_rep])) if per_rep else float("nan")
    metrics["median_rmse_clock_un_ns"] = float(np.median([r[1] for r in per_rep])) if per_rep else float("nan")
    return metrics


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return _clean(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def summarize(records: pd.DataFrame, warmup: int) -> Dict[str, Any]:
    """Metrics per mode key, pooled over replications after the warm-up. Pure function of the records."""
    return _json_ready({
        str(mode): _mode_metrics(df, warmup)
        for mode, df in records.groupby("mode", sort=False)
    })


def _slot_values(rec: EpochRecord, measurements: Sequence[EpochMeasurement], fs: FusionState, los_count: int) -> Dict[str, float]:
    by_an = {m.an_id: m for m in measurements}
    row: Dict[str, float] = {}
    for k in range(los_count):
        if k < len(rec.los):
            a = rec.los[k]
            theta, phi, tau = rec.truth[a]
            m = by_an.get(a)
            estimated = fs.an_offsets.get(a) if fs.mode.scheme is Scheme.POS_SYNC else None
            values = [
                a,
                rec.an_offsets[a] if estimated is not None else np.nan,
                estimated if estimated is not None else np.nan,
                theta, phi, tau,
                *(m.y if m is not None else (np.nan, np.nan, np.nan)),
            ]
        else:
            values = [np.nan] * len(SLOT_FIELDS)
        row.update({f"{name}_{k}": float(v) for name, v in zip(SLOT_FIELDS, values)})
    return row


def _truth_vector(rec: EpochRecord, fs: FusionState) -> np.ndarray:
    offsets = [rec.an_offsets[a] for a in fs.an_registry]
    return np.concatenate([rec.position, rec.velocity, [rec.un_clock.offset, rec.un_clock.skew], offsets])


def _init_mode(mode: FusionMode, rec: EpochRecord, cfg: ScenarioConfig, positions) -> FusionState:
    reference = cfg.network.reference_id
    fragment = init_position_cl([positions[a] for a in rec.los], cfg.fusion.position_var_floor)
    fs = init_fusion(
        mode, fragment, cfg.fusion.prior(),
        an_ids=[a for a in rec.los if a != reference],
        timestamp=rec.time,
        reference_an=reference,
    )
    if cfg.fusion.init == "truth":
        fs = FusionState(fs.state.replace(mean=_truth_vector(rec, fs)), fs.mode, fs.an_registry, fs.timestamp, fs.reference_an)
    return fs


def _run_mode(mode: FusionMode, records: Sequence[EpochRecord], stream, nodes, cfg: ScenarioConfig, replication: int):
    positions = {n.id: n.position for n in nodes}
    reference = cfg.network.reference_id
    params = cfg.fusion.params()
    rows = []
    fs = None
    for rec, measurements in zip(records, stream):
        if fs is None:
            fs = _init_mode(mode, rec, cfg, positions)
            dt = 0.0
        else:
            dt = rec.time - fs.timestamp
        if mode.scheme is Scheme.POS_SYNC:
            fs = manage_an_set(fs, [a for a in rec.los if a != reference], cfg.fusion.an_offset_std)
        fs = fuse_epoch(fs, measurements, positions, dt, params)
        mean = fs.state.mean
        row = {
            "schema_version": SCHEMA_VERSION,
            "replication": replication,
            "mode": mode.key,
            "epoch": rec.epoch,
            "t": rec.time,
            "x": rec.position[0], "y": rec.position[1], "z": rec.position[2],
            "x_hat": mean[0], "y_hat": mean[1], "z_hat": mean[2],
            "vx": rec.velocity[0], "vy": rec.velocity[1], "vz": rec.velocity[2],
            "vx_hat": mean[3], "vy_hat": mean[4], "vz_hat": mean[5],
            "rho_un": rec.un_clock.offset, "rho_un_hat": fs.clock_offset,
            "skew": rec.un_clock.skew, "skew_hat": fs.skew,
            "nees": nees(fs.state, _truth_vector(rec, fs)),
        }
        row.update(_slot_values(rec, measurements, fs, cfg.los_count))
        rows.append(row)
    return rows


def _run_stage1(records: Sequence[EpochRecord], eadf: Eadf, cfg: ScenarioConfig) -> Tuple[List[List[EpochMeasurement]], int]:
    """One tracker per LoS AN; trackers of ANs that leave LoS are dropped and re-initialized on return."""
    tuning = cfg.stage1.tuning(cfg.channel.coarse_toa_std)
    tau_grid, angle_grid = default_grids(eadf, cfg.stage1.n_tau, cfg.stage1.n_phi, cfg.stage1.n_theta)
    configured_R = np.diag([
        np.deg2rad(cfg.measurement.sigma_theta_deg) ** 2,
        np.deg2rad(cfg.measurement.sigma_phi_deg) ** 2,
        cfg.measurement.sigma_tau ** 2,
    ])
    trackers: Dict[int, TrackerState] = {}
    stream = []
    inits = 0
    for rec in records:
        trackers = {a: t for a, t in trackers.items() if a in rec.los}
        epoch = []
        for snap in rec.outputs:
            ts = trackers.get(snap.an_id)
            if ts is None or ts.needs_reinit:
                ts = init_tracker(snap, eadf, tau_grid, angle_grid, tuning)
                inits += 1
                estimate = (ts.phi, ts.theta, ts.tau)
                R_hat = symmetrize(ts.state.cov[np.ix_(OUTPUT_ORDER, OUTPUT_ORDER)])
            else:
                ts, estimate, R_hat = tracker_step(ts, snap, eadf, snap.timestamp - ts.timestamp)
            trackers[snap.an_id] = ts
            m = measurement_from_tracker(snap.an_id, estimate[0], estimate[1], estimate[2], R_hat, snap.timestamp)
            if cfg.fusion.r_source == "configured":
                m = EpochMeasurement(m.an_id, m.y, configured_R, m.timestamp)
            epoch.append(m)
        stream.append(epoch)
    return stream, inits


def run_replication(cfg: ScenarioConfig, replication: int, eadf: Optional[Eadf] = None):
    """One trajectory, one shared measurement stream, every configured mode."""
    world, rng = build_world(cfg, replication, eadf)
    if cfg.measurement.mode == "direct":
        noise = DirectNoise(
            np.deg2rad(cfg.measurement.sigma_theta_deg),
            np.deg2rad(cfg.measurement.sigma_phi_deg),
            cfg.measurement.sigma_tau,
        )
    else:
        noise = ChannelNoise(cfg.channel.snr_db, cfg.channel.coarse_toa_std)
    nodes = world.nodes
    records = simulate(world, cfg.measurement.mode, noise, rng)
    telemetry: Dict[str, Any] = {"replication": replication, "tracker_inits": 0, "modes": {}}
    if cfg.measurement.mode == "channel":
        started = time.perf_counter()
        stream, telemetry["tracker_inits"] = _run_stage1(records, eadf, cfg)
        telemetry["stage1_seconds"] = time.perf_counter() - started
    else:
        stream = [list(rec.outputs) for rec in records]
    digest = stream_digest(stream)

    rows = []
    for mode in cfg.fusion_modes:
        started = time.perf_counter()
        rows.extend(_run_mode(mode, records, stream, nodes, cfg, replication))
        consumed = stream_digest(stream)
        if consumed != digest:
            raise RuntimeError(f"measurement stream changed while running mode {mode.key}")
        telemetry["modes"][mode.key] = {"epochs": len(records), "seconds": time.perf_counter() - started}
    logger.info(json.dumps({
        "event": "replication_done",
        "replication": replication,
        "kind": world.trajectory.kind,
        "stream_sha256": digest,
    }))
    return pd.DataFrame(rows, columns=epoch_columns(cfg.los_count)), digest, telemetry


def build_summary(records: pd.DataFrame, cfg: ScenarioConfig, digests: Sequence[str]) -> Dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "warmup": cfg.warmup,
        "replications": cfg.replications,
        "epochs_per_replication": cfg.n_epochs,
        "stream_sha256": list(digests),
        "modes": summarize(records, cfg.warmup),
    }


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    eadf = build_eadf(cfg.channel) if cfg.measurement.mode == "channel" else None
    logger.info(json.dumps({
        "event": "scenario_start",
        "seed": cfg.seed,
        "replications": cfg.replications,
        "modes": list(cfg.modes),
        "measurement": cfg.measurement.mode,
    }))
    outputs = Parallel(n_jobs=cfg.n_jobs)(
        delayed(run_replication)(cfg, r, eadf) for r in range(cfg.replications)
    )
    records = pd.concat([o[0] for o in outputs], ignore_index=True)
    digests = [o[1] for o in outputs]
    summary = build_summary(records, cfg, digests)
    logger.info(json.dumps({
        "event": "scenario_done",
        "rmse_3d": {k: v["rmse_3d"] for k, v in summary["modes"].items()},
    }))
    return RunResult(records, summary, cfg, digests, [o[2] for o in outputs])


def provenance(config_sha256: Optional[str] = None) -> Dict[str, Any]:
    return {
        "package_version": possync.__version__,
        "framework_versions": {
            "python": sys.version,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "joblib": joblib.__version__,
        },
        "config_sha256": config_sha256,
    }


def _telemetry_registry(result: RunResult) -> CollectorRegistry:
    reg = CollectorRegistry()
    epochs = Counter("possync_epochs_processed", "Fusion epochs processed", ["mode"], registry=reg)
    inits = Counter("possync_tracker_initializations", "Stage-1 tracker (re)initializations", registry=reg)
    stage1 = Counter("possync_stage1_seconds", "Wall time spent in stage-1 tracking", registry=reg)
    seconds = Histogram(
        "possync_mode_run_seconds", "Wall time of one mode over one replication", ["mode"],
        buckets=(0.1, 0.5, 1, 2, 5, 10, 30, 60, 120), registry=reg,
    )
    rmse_gauge = Gauge("possync_rmse_3d_meters", "Post-warm-up 3D position RMSE", ["mode"], registry=reg)
    for tel in result.telemetry:
        inits.inc(tel.get("tracker_inits", 0))
        stage1.inc(tel.get("stage1_seconds", 0.0))
        for key, stats in tel["modes"].items():
            epochs.labels(mode=key).inc(stats["epochs"])
            seconds.labels(mode=key).observe(stats["seconds"])
    for key, metrics in result.summary["modes"].items():
        if metrics["rmse_3d"] is not None:
            rmse_gauge.labels(mode=key).set(metrics["rmse_3d"])
    return reg


def write_outputs(result: RunResult, out_dir, config_sha256: Optional[str] = None) -> Dict[str, Path]:
    """Write the run directory; created if missing, OutputError if it cannot be written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create output directory {out}: {e}")
    if not os.access(out, os.W_OK):
        raise OutputError(f"output directory {out} is not writable")
    paths = {
        "epochs": out / "epochs.csv",
        "summary": out / "summary.json",
        "config": out / "config_echo.json",
        "metrics": out / "metrics.prom",
    }
    try:
        result.records.to_csv(paths["epochs"], index=False, float_format="%.17g")
        paths["summary"].write_text(json.dumps(result.summary, indent=2, allow_nan=False))
        echo = {"config": to_dict(result.config), "provenance": provenance(config_sha256)}
        paths["config"].write_text(json.dumps(echo, indent=2))
        write_to_textfile(str(paths["metrics"]), _telemetry_registry(result))
    except OSError as e:
        raise OutputError(f"cannot write results to {out}: {e}")
    logger.info(json.dumps({"event": "outputs_written", "out_dir": str(out)}))
    return paths


def read_run(out_dir) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    out = Path(out_dir)
    try:
        records = pd.read_csv(out / "epochs.csv", float_precision="round_trip")
        summary = json.loads((out / "summary.json").read_text())
    except (OSError, ValueError) as e:
        raise OutputError(f"cannot read run directory {out}: {e}")
    return records, summary

