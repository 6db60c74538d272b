"""Result files: per-run trajectories, per-run summaries and aggregate tables.

Everything written here except ``timing.csv`` is a deterministic function
of the scenario and seed, so repeated runs produce identical files.
"""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from .trial import LOG_COLUMNS, RunResult

TRAJECTORY_COLUMNS = [c for c in LOG_COLUMNS if c != "cycle_time"]
SUMMARY_COLUMNS = ["controller", "disturbance", "trial", "rmse", "rmse_literal",
                   "mean_error", "max_error", "saturation_fraction", "aborted", "cycles"]
TIMING_COLUMNS = ["controller", "disturbance", "trial", "median_cycle_ms", "p95_cycle_ms",
                  "max_cycle_ms"]


def slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "-", str(text)).strip("-").lower()


def run_filename(result: RunResult) -> str:
    return f"{result.controller}__{slug(result.disturbance)}__trial{result.trial:03d}.csv"


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_trajectory(result: RunResult, path):
    """Per-step log as CSV, one row per control cycle."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        cols = [result.log[c] for c in TRAJECTORY_COLUMNS]
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def write_summary(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in results:
            s = r.summary
            w.writerow([r.controller, r.disturbance, r.trial] +
                       [_fmt(s[c]) for c in SUMMARY_COLUMNS[3:]])


def write_timing(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for r in results:
            t = 1e3 * np.asarray(r.log["cycle_time"], dtype=float)
            w.writerow([r.controller, r.disturbance, r.trial,
                        f"{np.median(t):.6f}", f"{np.percentile(t, 95):.6f}",
                        f"{np.max(t):.6f}"])


def read_summary(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["trial"] = int(row["trial"])
        for key in SUMMARY_COLUMNS[3:]:
            row[key] = float(row[key])
    return rows


def aggregate(rows, controllers=None, disturbances=None, metric: str = "rmse"):
    """Mean and population std of ``metric`` per (controller, disturbance).

    Order follows ``controllers``/``disturbances`` when given, otherwise
    first appearance.  Aborted runs are excluded and counted.
    """
    def order(key, given):
        seen = list(given or [])
        for r in rows:
            if r[key] not in seen:
                seen.append(r[key])
        return seen

    ctrl = order("controller", controllers)
    dist = order("disturbance", disturbances)
    table = {}
    for c in ctrl:
        for d in dist:
            vals = [r[metric] for r in rows if r["controller"] == c and r["disturbance"] == d
                    and not r["aborted"]]
            aborted = sum(1 for r in rows if r["controller"] == c and r["disturbance"] == d
                          and r["aborted"])
            if vals or aborted:
                v = np.asarray(vals, dtype=float)
                table[(c, d)] = {"mean": float(v.mean()) if v.size else float("nan"),
                                 "std": float(v.std()) if v.size else float("nan"),
                                 "n": int(v.size), "aborted": aborted}
    return ctrl, dist, table


def write_tables(rows, out_dir, controllers=None, disturbances=None):
    """``table.csv`` (long form) and ``table.txt`` (aligned, mean +- std) for
    the standard RMSE, plus the same for the literal formula."""
    out_dir = Path(out_dir)
    texts = []
    with open(out_dir / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "controller", "disturbance", "mean", "std", "n", "aborted"])
        for metric in ("rmse", "rmse_literal"):
            ctrl, dist, table = aggregate(rows, controllers, disturbances, metric)
            for c in ctrl:
                for d in dist:
                    if (c, d) in table:
                        e = table[(c, d)]
                        w.writerow([metric, c, d, f"{e['mean']:.6f}", f"{e['std']:.6f}",
                                    e["n"], e["aborted"]])
            texts.append(format_table(ctrl, dist, table, metric))
    footnote = ("rmse: sqrt(mean(e^2)) over the second half of each run; rmse_literal: "
                "sqrt(mean(e)), the unsquared variant.\n"
                "Entries are mean +- population std over trials; aborted runs are "
                "excluded.\n")
    (out_dir / "table.txt").write_text("\n".join(texts) + "\n" + footnote)


def format_table(ctrl, dist, table, metric="rmse") -> str:
    header = [metric] + list(dist)
    body = []
    for c in ctrl:
        row = [c]
        for d in dist:
            e = table.get((c, d))
            row.append("-" if e is None else f"{e['mean']:.4f} +- {e['std']:.4f}")
        body.append(row)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(s.ljust(wd) for s, wd in zip(r, widths)).rstrip()
             for r in [header] + body]
    return "\n".join(lines) + "\n"


def report(results_dir, controllers=None, disturbances=None):
    """Rebuild the tables of a results directory from its ``summary.csv``."""
    results_dir = Path(results_dir)
    rows = read_summary(results_dir / "summary.csv")
    if not rows:
        raise ValueError("summary.csv holds no runs")
    write_tables(rows, results_dir, controllers, disturbances)
    return rows
