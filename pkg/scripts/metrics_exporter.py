#!/usr/bin/env python3
"""
Expose the summary.json of a run directory as Prometheus metrics.

Usage:
  python scripts/metrics_exporter.py --file results/summary.json --port 9108
"""
import argparse
import json
import os
from http.server import BaseHTTPRequestHandler, HTTPServer
from prometheus_client import CollectorRegistry, Gauge, generate_latest, CONTENT_TYPE_LATEST

MODE_GAUGES = {
    "rmse_3d": ("possync_rmse_3d_meters", "Post-warm-up 3D position RMSE"),
    "rmse_2d": ("possync_rmse_2d_meters", "Post-warm-up horizontal position RMSE"),
    "rmse_z": ("possync_rmse_z_meters", "Post-warm-up height RMSE"),
    "rmse_clock_un_ns": ("possync_rmse_clock_un_ns", "UN clock offset RMSE"),
    "rmse_clock_an_ns": ("possync_rmse_clock_an_ns", "AN clock offset RMSE"),
    "mean_nees": ("possync_mean_nees", "Mean NEES of the fusion state"),
}


def load_json(path):
    try:
        with open(path, "r") as f:
            return json.load(f)
    except Exception:
        return None


def build_registry(data):
    reg = CollectorRegistry()
    g_timestamp = Gauge("possync_summary_mtime_seconds", "Modification time of summary.json", registry=reg)
    g_replications = Gauge("possync_replications", "Replications in the run", registry=reg)
    gauges = {key: Gauge(name, doc, ["mode"], registry=reg) for key, (name, doc) in MODE_GAUGES.items()}

    if data and "modes" in data:
        g_replications.set(data.get("replications", 0))
        if data.get("_mtime"):
            g_timestamp.set(data["_mtime"])
        for mode, m in data["modes"].items():
            for key, gauge in gauges.items():
                # null means no valid epochs for that metric
                if m.get(key) is not None:
                    gauge.labels(mode=mode).set(m[key])
    return reg


class MetricsServer(BaseHTTPRequestHandler):
    json_path = None

    def do_GET(self):
        if self.path != "/metrics":
            self.send_response(404); self.end_headers(); return

        data = load_json(self.json_path)
        if data is not None:
            data["_mtime"] = os.path.getmtime(self.json_path)

        out = generate_latest(build_registry(data))
        self.send_response(200)
        self.send_header("Content-Type", CONTENT_TYPE_LATEST)
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--file", default=os.environ.get("POSSYNC_SUMMARY_FILE", "results/summary.json"))
    ap.add_argument("--port", type=int, default=int(os.environ.get("EXPORTER_PORT", "9108")))
    args = ap.parse_args()

    MetricsServer.json_path = args.file
    server = HTTPServer(("0.0.0.0", args.port), MetricsServer)
    print(f"[exporter] Serving metrics from {args.file} on :{args.port}/metrics")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass

if __name__ == "__main__":
    main()
