"""Command-line entry point: ``asvctl {run,collect,extract,tune,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .. import __version__
from .report import report, run_filename, write_summary, write_timing, write_trajectory
from .scenario import Scenario, shipped_scenario

_CONTEXTS = {}


def _load_scenario(args) -> Scenario:
    path = Path(args.scenario)
    if not path.exists() and not path.suffix:
        path = shipped_scenario(args.scenario)
    sc = Scenario.load(path)
    if args.seed is not None:
        sc.seed = args.seed
    if args.trials is not None:
        if args.trials < 1:
            raise SystemExit("--trials must be at least 1")
        sc.trials = args.trials
    return sc


def _context(scenario_doc, base_dir):
    from .trial import prepare
    key = (yaml.safe_dump(scenario_doc), base_dir)
    if key not in _CONTEXTS:
        sc = Scenario.from_dict(scenario_doc, base_dir)
        _CONTEXTS[key] = (sc, prepare(sc))
    return _CONTEXTS[key]


def _run_cell(job):
    from .trial import run_trial
    scenario_doc, base_dir, controller, case_index, trial = job
    sc, ctx = _context(scenario_doc, base_dir)
    return run_trial(sc, controller, sc.disturbances[case_index], trial, ctx)


def run_scenario(sc: Scenario, out: Path | None, jobs: int = 1, trajectories: bool = True,
                 progress=None) -> list:
    """Every (controller, disturbance, trial) cell of ``sc``; results are sorted
    by declaration order and trial index regardless of ``jobs``."""
    doc = sc.to_dict()
    base = None if sc.base_dir is None else str(sc.base_dir)
    cells = [(doc, base, c, i, t) for i in range(len(sc.disturbances))
             for c in sc.controllers for t in range(sc.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = []
        for cell in cells:
            results.append(_run_cell(cell))
            if progress:
                r = results[-1]
                progress(f"{r.controller:>10s} | {r.disturbance:<14s} | trial {r.trial:3d} | "
                         f"rmse {r.summary['rmse']:.4f} m")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        sc.dump(out / "scenario.yaml")
        if trajectories:
            (out / "runs").mkdir(exist_ok=True)
            for r in results:
                write_trajectory(r, out / "runs" / run_filename(r))
        write_summary(results, out / "summary.csv")
        write_timing(results, out / "timing.csv")
        report(out, sc.controllers, [c.label for c in sc.disturbances])
    return results


def cmd_run(args):
    sc = _load_scenario(args)
    out = Path(args.out)
    t0 = time.perf_counter()
    run_scenario(sc, out, args.jobs, not args.no_trajectories,
                 progress=None if args.quiet else print)
    print((out / "table.txt").read_text())
    print(f"wrote {out} in {time.perf_counter() - t0:.1f} s")


def cmd_collect(args):
    from .trial import collect_dataset
    sc = _load_scenario(args)
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "dataset.csv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    controller = args.controller
    ds = collect_dataset(sc, controller=controller)
    ds.save(out)
    print(f"wrote {len(ds)} records to {out}")


def cmd_extract(args):
    from ..extractor import ExtractorConfig, ResidualDataset, extract
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = yaml.safe_load(fh) or {}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.count is not None:
        doc["count"] = args.count
    cfg = ExtractorConfig.from_dict(doc)
    ds = ResidualDataset.load(args.dataset)
    t0 = time.perf_counter()
    result, sel = extract(ds, cfg)
    out = Path(args.out)
    if out.suffix != ".txt":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "features.txt"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    sel.feature_map.save(out)
    losses = ", ".join(f"{v:.5f}" for v in result.losses)
    print(f"epoch losses: {losses}")
    print(f"selected {len(sel.feature_map)} of {cfg.raw_size} raw features "
          f"in {time.perf_counter() - t0:.1f} s -> {out}")


def cmd_tune(args):
    from ..baselines import tune_terminal_weight
    from ..vessel import default_params, load_params
    sc = _load_scenario(args)
    vessel = sc.resolve(sc.vessel)
    params = default_params() if vessel is None else load_params(vessel)
    res = tune_terminal_weight(params, sc.mpc)
    lines = [
        f"iterations: {res.iterations}",
        f"riccati residual: {res.residual:.3e}",
        f"spectral radius (A - B K): {res.spectral_radius:.6f}",
        "closed-loop eigenvalues: " + ", ".join(f"{e:.4f}" for e in res.eigenvalues),
        "K = " + np.array2string(res.K, precision=4, max_line_width=120),
    ]
    lines += [f"advisory: {a}" for a in res.advisories()]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tuning.txt").write_text(text)
        np.savetxt(out / "terminal_weight.csv", res.terminal_x, delimiter=",", fmt="%.17g")


def cmd_report(args):
    rows = report(args.out)
    print(Path(args.out, "table.txt").read_text())
    print(f"{len(rows)} runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asvctl", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True,
                           help="scenario YAML file or the name of a shipped scenario")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--trials", type=int, default=None, help="override the trial count")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("run", help="run every cell of a scenario")
    common(p)
    p.add_argument("--out", required=True, help="results directory")
    p.add_argument("--no-trajectories", action="store_true",
                   help="skip the per-run trajectory CSVs")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("collect", help="log a residual dataset for the extractor")
    common(p)
    p.add_argument("--out", required=True, help="dataset CSV path or directory")
    p.add_argument("--controller", default="mpc", choices=["mpc", "l1-mpc", "online-mpc"])
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("extract", help="bi-level feature extraction on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="extractor YAML (keys of ExtractorConfig)")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1, help="accepted for symmetry; unused")
    p.add_argument("--out", required=True, help="feature map path (.txt) or directory")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("tune", help="Riccati terminal weight for a scenario's MPC")
    common(p)
    p.add_argument("--out", default=None, help="directory for tuning.txt and the weight")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("report", help="rebuild tables from a results directory")
    p.add_argument("--out", required=True, help="results directory holding summary.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"asvctl: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
