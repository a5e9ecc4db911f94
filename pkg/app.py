"""
possync command line.

  python app.py run --config scenario.json --out results/ [--seed N] [--modes a,b] [--replications R] [--n-jobs J]
  python app.py validate --config scenario.json
  python app.py schema
  python app.py truth --config scenario.json --out truth/

Exit codes: 0 success, 2 configuration or output error, 3 numerical failure.
"""
import argparse
import json
import logging
import os
import sys
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path

import numpy as np

from possync.config import CONFIG_SCHEMA, load_config, with_overrides
from possync.errors import ConfigError, NumericalFailure, OutputError, SingularGeometry
from possync.evaluation import run_scenario, write_outputs
from possync.scenario import ChannelNoise, DirectNoise, build_eadf, build_world, simulate, truth_frame

logger = logging.getLogger("possync.app")


def configure_logging(log_dir=None):
    # Configure logging with 7-day rotation
    log_dir = log_dir or os.getenv("POSSYNC_LOG_DIR", "logs")
    os.makedirs(log_dir, exist_ok=True)

    handler = TimedRotatingFileHandler(
        os.path.join(log_dir, "possync.log"),
        when="midnight",       # Rotate at midnight
        interval=1,
        backupCount=7          # Keep 7 days of logs
    )
    handler.setFormatter(logging.Formatter("%(message)s"))
    stream = logging.StreamHandler()
    stream.setFormatter(logging.Formatter("%(message)s"))

    logging.basicConfig(
        level=os.getenv("POSSYNC_LOG_LEVEL", "INFO").upper(),
        handlers=[handler, stream],
        force=True,
    )


def _load(args):
    cfg, sha = load_config(args.config)
    cfg = with_overrides(
        cfg,
        seed=getattr(args, "seed", None),
        modes=getattr(args, "modes", None),
        replications=getattr(args, "replications", None),
        n_jobs=getattr(args, "n_jobs", None),
    )
    return cfg, sha


def cmd_run(args):
    cfg, sha = _load(args)
    result = run_scenario(cfg)
    paths = write_outputs(result, args.out, config_sha256=sha)
    for key, metrics in result.summary["modes"].items():
        print(f"INFO: {key}: rmse_3d={metrics['rmse_3d']} m, rmse_clock_un={metrics['rmse_clock_un_ns']} ns")
    print(f"INFO: Results written to {paths['summary'].parent}")
    return 0


def cmd_validate(args):
    cfg, _ = _load(args)
    print(f"INFO: {args.config} is valid ({cfg.replications} replications, {len(cfg.modes)} modes)")
    return 0


def cmd_schema(args):
    print(json.dumps(CONFIG_SCHEMA, indent=2))
    return 0


def cmd_truth(args):
    cfg, _ = _load(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create output directory {out}: {e}")
    channel = cfg.measurement.mode == "channel"
    eadf = build_eadf(cfg.channel) if channel else None
    if channel:
        noise = ChannelNoise(cfg.channel.snr_db, cfg.channel.coarse_toa_std)
    else:
        noise = DirectNoise(
            np.deg2rad(cfg.measurement.sigma_theta_deg),
            np.deg2rad(cfg.measurement.sigma_phi_deg),
            cfg.measurement.sigma_tau,
        )
    for r in range(cfg.replications):
        world, rng = build_world(cfg, r, eadf)
        frame = truth_frame(simulate(world, cfg.measurement.mode, noise, rng))
        path = out / f"truth_rep{r:03d}.csv"
        try:
            frame.to_csv(path, index=False, float_format="%.17g")
        except OSError as e:
            raise OutputError(f"cannot write {path}: {e}")
        logger.info(json.dumps({"event": "truth_written", "replication": r, "path": str(path), "rows": len(frame)}))
    print(f"INFO: Truth streams for {cfg.replications} replications written to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(description="Cascaded DoA/ToA tracking and joint positioning/synchronization simulator.")
    parser.add_argument("--log-dir", default=None, help="Directory for rotating log files (default $POSSYNC_LOG_DIR or logs/).")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a scenario and write the results directory.")
    run.add_argument("--config", required=True, help="Scenario JSON file.")
    run.add_argument("--out", required=True, help="Output directory.")
    run.add_argument("--seed", type=int, default=None, help="Override the configured seed.")
    run.add_argument("--modes", default=None, help="Comma-separated filter modes, e.g. pos_clock-ukf-doa_toa.")
    run.add_argument("--replications", type=int, default=None, help="Override the replication count.")
    run.add_argument("--n-jobs", dest="n_jobs", type=int, default=None, help="Parallel replications (joblib).")
    run.set_defaults(func=cmd_run)

    validate = sub.add_parser("validate", help="Validate a scenario file against the schema.")
    validate.add_argument("--config", required=True)
    validate.set_defaults(func=cmd_validate)

    schema = sub.add_parser("schema", help="Print the scenario JSON schema.")
    schema.set_defaults(func=cmd_schema)

    truth = sub.add_parser("truth", help="Dump truth streams as CSV, one file per replication.")
    truth.add_argument("--config", required=True)
    truth.add_argument("--out", required=True)
    truth.add_argument("--seed", type=int, default=None)
    truth.add_argument("--replications", type=int, default=None)
    truth.set_defaults(func=cmd_truth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command != "schema":
        configure_logging(args.log_dir)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 2
    except OutputError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 2
    except NumericalFailure as e:
        logger.error(json.dumps({"status": "numerical_failure", "error": str(e), "condition": e.condition}))
        print(f"ERROR: numerical failure: {e}", file=sys.stderr)
        return 3
    except SingularGeometry as e:
        logger.error(json.dumps({"status": "singular_geometry", "error": str(e)}))
        print(f"ERROR: singular geometry: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
