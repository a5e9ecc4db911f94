"""
Re-evaluate a finished run directory and gate it on RMSE thresholds.

  python scripts/offline_evaluation.py --run-dir results/ --rmse-3d-max 5 --clock-un-max-ns 20
"""
import argparse
import json
import math
import os
import sys
from datetime import datetime
from pathlib import Path

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from possync.errors import OutputError
from possync.evaluation import read_run, summarize

GATED_METRICS = ["rmse_3d", "rmse_2d", "rmse_z", "rmse_clock_un_ns", "rmse_clock_an_ns", "mean_nees"]


# ---------- Helper Functions ----------

def _close(a, b, rel=1e-9):
    if a is None or b is None:
        return a is None and b is None
    return math.isclose(a, b, rel_tol=rel, abs_tol=1e-12)


def summary_mismatches(recomputed, stored):
    """Metrics whose recomputed value differs from summary.json."""
    problems = []
    for mode, metrics in recomputed.items():
        if mode not in stored:
            problems.append(f"{mode}: missing from summary.json")
            continue
        for key in GATED_METRICS:
            if not _close(metrics.get(key), stored[mode].get(key)):
                problems.append(f"{mode}.{key}: recomputed {metrics.get(key)} != stored {stored[mode].get(key)}")
    return problems


def run_full_evaluation(run_dir, modes=None):
    records, summary = read_run(run_dir)
    if modes:
        records = records[records["mode"].isin(modes)]
    recomputed = summarize(records, summary["warmup"])
    return {
        "run_dir": str(run_dir),
        "warmup": summary["warmup"],
        "replications": summary["replications"],
        "modes": recomputed,
        "mismatches": summary_mismatches(recomputed, summary["modes"]),
        "generated_at": datetime.utcnow().isoformat(),
    }


def threshold_failures(metrics, rmse_3d_max=None, clock_un_max_ns=None, clock_an_max_ns=None):
    failures = []
    for mode, m in metrics["modes"].items():
        if rmse_3d_max is not None and (m["rmse_3d"] is None or m["rmse_3d"] > rmse_3d_max):
            failures.append(f"{mode}: RMSE 3D {m['rmse_3d']} m > {rmse_3d_max}")
        if clock_un_max_ns is not None and (m["rmse_clock_un_ns"] is None or m["rmse_clock_un_ns"] > clock_un_max_ns):
            failures.append(f"{mode}: UN clock RMSE {m['rmse_clock_un_ns']} ns > {clock_un_max_ns}")
        # pos_clock modes carry no AN offsets
        if clock_an_max_ns is not None and m["rmse_clock_an_ns"] is not None and m["rmse_clock_an_ns"] > clock_an_max_ns:
            failures.append(f"{mode}: AN clock RMSE {m['rmse_clock_an_ns']} ns > {clock_an_max_ns}")
    return failures


def main(argv=None):
    parser = argparse.ArgumentParser(description="Recompute run metrics from epochs.csv and apply thresholds.")
    parser.add_argument("--run-dir", required=True, help="Directory written by `app.py run`.")
    parser.add_argument("--modes", default=None, help="Comma-separated mode keys to evaluate (default all).")
    parser.add_argument("--metrics-out", help="Optional JSONL file to append the metrics to.")
    parser.add_argument("--rmse-3d-max", type=float, default=None,
                        help="Maximum acceptable 3D position RMSE in meters.")
    parser.add_argument("--clock-un-max-ns", type=float, default=None,
                        help="Maximum acceptable UN clock offset RMSE in ns.")
    parser.add_argument("--clock-an-max-ns", type=float, default=None,
                        help="Maximum acceptable AN clock offset RMSE in ns.")
    args = parser.parse_args(argv)

    modes = [m.strip() for m in args.modes.split(",")] if args.modes else None
    try:
        metrics = run_full_evaluation(args.run_dir, modes)
    except OutputError as e:
        print(f"ERROR: {e}")
        raise SystemExit(2)

    print("\n=== Offline Evaluation Summary ===")
    for mode, m in metrics["modes"].items():
        print(f"INFO: {mode}: rmse_3d={m['rmse_3d']} m, rmse_2d={m['rmse_2d']} m, "
              f"rmse_clock_un={m['rmse_clock_un_ns']} ns, rmse_clock_an={m['rmse_clock_an_ns']} ns")

    if args.metrics_out:
        metrics_path = Path(args.metrics_out)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)

        with metrics_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(metrics) + "\n")
        print(f"\nMetrics appended to {metrics_path}")

    failures = list(metrics["mismatches"])
    failures += threshold_failures(metrics, args.rmse_3d_max, args.clock_un_max_ns, args.clock_an_max_ns)

    if failures:
        print("\n❌ Evaluation failed thresholds:")
        for reason in failures:
            print(f"- {reason}")
        raise SystemExit(2)

    print("\n✅ Evaluation passed all thresholds.")


if __name__ == "__main__":
    main()
