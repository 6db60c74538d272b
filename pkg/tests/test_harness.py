"""Harness: references, scenarios, metrics, trials, reports and the command line."""

import filecmp
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from asvctl.extractor import ResidualDataset
from asvctl.harness.cli import main
from asvctl.harness.metrics import (compute_rmse, initial_offset, planar_errors,
                                    sample_initial_offset, trial_rng)
from asvctl.harness.reference import (TURN_RATE, lawnmower_segments, make_reference)
from asvctl.harness.report import aggregate, format_table, read_summary, write_summary
from asvctl.harness.scenario import SCHEMA, Scenario, parse_disturbance, shipped_scenario
from asvctl.harness.trial import (LOG_COLUMNS, RunResult, collect_dataset, prepare,
                                  run_trial)
from asvctl.liegroup import heading


def small_scenario(disturbance=None, duration=20.0, **kw):
    doc = {"trajectory": {"kind": "zigzag", "duration": duration},
           "disturbance": disturbance or {"kind": "none"}, "trials": 1, "seed": 7}
    doc.update(kw)
    return Scenario.from_dict(doc)


# reference trajectories

def test_zigzag_initial_yaw_rate():
    traj = make_reference("zigzag", duration=10.0)
    assert traj.twists[0, 2] == 0.1
    assert np.all(traj.twists[:, 3] == 0.5)
    t = 7.3
    k = int(round(t / traj.dt))
    assert traj.twists[k, 2] == pytest.approx(0.1 * math.cos(k * traj.dt / 100.0), abs=1e-15)


def test_lawnmower_turns_are_quarter_turns():
    traj = make_reference("lawnmower", duration=128.0)
    segs = lawnmower_segments(128.0)
    assert sum(d for d, _ in segs) == pytest.approx(128.0)
    edges = np.concatenate([[0.0], np.cumsum([d for d, _ in segs])])
    yaw = np.unwrap([heading(X) for X in traj.poses])
    turns = [(edges[i], edges[i + 1]) for i, (_, r) in enumerate(segs) if r != 0.0]
    assert len(turns) == 6
    for (a, b), (d, r) in zip(turns, [s for s in segs if s[1] != 0.0]):
        assert d == pytest.approx(0.5 * math.pi / TURN_RATE)
        # sample indices bracketing the turn, padded by straight samples
        ia, ib = int(math.floor(a / traj.dt)), int(math.ceil(b / traj.dt)) + 1
        change = yaw[ib] - yaw[ia]
        assert abs(abs(change) - math.pi / 2) <= 1e-6
        assert math.copysign(1.0, change) == math.copysign(1.0, r)


@pytest.mark.parametrize("kind", ["zigzag", "lawnmower"])
def test_reference_consistency(kind):
    traj = make_reference(kind, duration=128.0)
    assert traj.consistency_error() <= 1e-12


def test_reference_tail_continues_pattern():
    base = make_reference("zigzag", duration=10.0)
    longer = make_reference("zigzag", duration=10.0, tail=0.6)
    assert len(longer) == len(base) + 30
    assert np.array_equal(longer.poses[:len(base)], base.poses)
    lawn = make_reference("lawnmower", duration=128.0, tail=1.0)
    assert np.all(lawn.twists[-50:, 2] == 0.0) and np.all(lawn.twists[-50:, 3] == 0.5)


def test_reference_from_file(tmp_path):
    rows = np.column_stack([np.arange(11) * 0.02, np.zeros(11), np.zeros(11),
                            np.full(11, 0.2), np.full(11, 0.4), np.zeros(11), np.zeros(11)])
    path = tmp_path / "ref.csv"
    np.savetxt(path, rows, delimiter=",")
    traj = make_reference("file", duration=0.2, path=path)
    assert len(traj) == 11
    assert traj.consistency_error() <= 1e-12


def test_reference_errors():
    with pytest.raises(ValueError):
        make_reference("spiral")
    with pytest.raises(ValueError):
        make_reference("lawnmower", duration=10.0)
    with pytest.raises(ValueError):
        make_reference("zigzag", duration=-1.0)


# scenarios

@pytest.mark.parametrize("name", ["zigzag", "lawnmower", "collect"])
def test_shipped_scenarios_load(name):
    sc = Scenario.load(shipped_scenario(name))
    assert sc.substeps >= 1
    assert sc.cycles == int(round(sc.duration * sc.control_rate))


def test_zigzag_scenario_protocol():
    sc = Scenario.load(shipped_scenario("zigzag"))
    assert sc.trials == 10
    assert sc.duration == 128.0 and sc.control_rate == 50.0
    assert [c.label for c in sc.disturbances] == ["0 m/s", "1 m/s", "2 m/s", "3 m/s"]
    assert sc.controllers == ["pid", "mpc", "l1-mpc", "online-mpc"]


def test_scenario_round_trip(tmp_path):
    sc = Scenario.load(shipped_scenario("zigzag"))
    path = tmp_path / "sc.yaml"
    sc.dump(path)
    back = Scenario.load(path)
    assert back.to_dict() == sc.to_dict()


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario.from_dict({"schema": "scenario/0"})
    with pytest.raises(ValueError):
        Scenario.from_dict({"controllers": ["lqr"]})
    with pytest.raises(ValueError):
        Scenario.from_dict({"plant_dt": 0.03})
    with pytest.raises(ValueError):
        Scenario.from_dict({"duration": 0.0})
    with pytest.raises(ValueError):
        Scenario.from_dict({"colour": "red"})
    with pytest.raises(ValueError):
        Scenario.from_dict({"disturbance": {"kind": "none"}, "disturbances": []})
    assert Scenario.from_dict({"schema": SCHEMA}).trials == 10


def test_wind_shorthand():
    case = parse_disturbance({"kind": "wind", "speed": 2.0})
    assert case.label == "wind 2 m/s"
    assert case.spec.kind == "wind_field"
    assert np.allclose(case.spec.wind_velocity, [0.0, 2.0, 0.0])


# metrics

def test_initial_offset_examples():
    assert np.array_equal(initial_offset(0.0, 1.3), [0.0, 0.0, 0.0])
    assert np.allclose(initial_offset(1.0, 0.0), [1.0, 0.0, 0.0], atol=0.0)


def test_offset_mean_radius():
    rng = trial_rng(0, 0)
    d = sample_initial_offset(rng, size=100_000)
    r = np.hypot(d[:, 0], d[:, 1])
    print(f"mean radius {r.mean():.5f}")
    assert abs(r.mean() - 2.0 / 3.0) <= 0.01
    assert r.max() <= 1.0 and np.all(d[:, 2] == 0.0)


def test_trial_rng_is_keyed():
    a = trial_rng(5, 3).uniform(size=4)
    assert np.array_equal(a, trial_rng(5, 3).uniform(size=4))
    assert not np.array_equal(a, trial_rng(5, 4).uniform(size=4))
    assert not np.array_equal(a, trial_rng(6, 3).uniform(size=4))
    assert not np.array_equal(a, trial_rng(5, 3, stream=1).uniform(size=4))


def test_rmse_examples():
    assert compute_rmse(np.zeros(10), "all") == {"standard": 0.0, "literal": 0.0}
    ones = compute_rmse(np.ones(10), "all")
    assert ones["standard"] == 1.0 and ones["literal"] == 1.0
    alt = compute_rmse(np.tile([0.0, 2.0], 5), "all")
    assert alt["standard"] == pytest.approx(math.sqrt(2.0), abs=1e-15)
    assert alt["literal"] == pytest.approx(1.0, abs=1e-15)


def test_rmse_uses_second_half():
    e = np.concatenate([np.full(50, 10.0), np.full(50, 1.0)])
    assert compute_rmse(e)["standard"] == 1.0
    assert compute_rmse(np.arange(5.0))["standard"] == pytest.approx(
        math.sqrt(np.mean(np.arange(2.0, 5.0) ** 2)))
    with pytest.raises(ValueError):
        compute_rmse([])
    with pytest.raises(ValueError):
        compute_rmse([1.0], "first_half")


def test_planar_errors():
    assert np.allclose(planar_errors([[3.0, 4.0], [1.0, 1.0]], [[0.0, 0.0], [1.0, 1.0]]),
                       [5.0, 0.0])


# trials

def test_run_length_and_determinism():
    sc = small_scenario({"kind": "wind", "speed": 2.0}, duration=6.0)
    ctx = prepare(sc)
    a = run_trial(sc, "online-mpc", trial=3, context=ctx)
    b = run_trial(sc, "online-mpc", trial=3, context=ctx)
    assert len(a.log["time"]) == sc.cycles == 300
    for c in LOG_COLUMNS:
        if c != "cycle_time":
            assert a.log[c].tobytes() == b.log[c].tobytes(), c
    assert a.summary["rmse"] == b.summary["rmse"]
    # summary is recomputable from the log
    rm = compute_rmse(a.log["error"])
    assert a.summary["rmse"] == rm["standard"] and a.summary["rmse_literal"] == rm["literal"]


def test_trials_differ_in_initial_offset():
    sc = small_scenario(duration=1.0)
    a = run_trial(sc, "mpc", trial=0)
    b = run_trial(sc, "mpc", trial=1)
    assert a.log["x"][0] != b.log["x"][0]
    expected = sample_initial_offset(trial_rng(7, 1))
    assert b.log["x"][0] == expected[0] and b.log["y"][0] == expected[1]


def test_learner_neutral_in_zero_residual_regime():
    """On a straight line started on the reference the nominal model is exact,
    residuals vanish and the learner never moves away from zero."""
    sc = small_scenario(trajectory={"kind": "zigzag", "amplitude": 0.0, "duration": 20.0},
                        initial_offset=False)
    ctx = prepare(sc)
    nominal = run_trial(sc, "mpc", context=ctx)
    online = run_trial(sc, "online-mpc", context=ctx)
    assert online.summary["rmse"] <= nominal.summary["rmse"] + 1e-3
    assert np.abs(online.learner["weights"]).max() <= 1e-9


def test_learner_neutral_without_disturbance():
    sc = small_scenario(duration=40.0)
    ctx = prepare(sc)
    nominal = run_trial(sc, "mpc", context=ctx).summary["rmse"]
    online = run_trial(sc, "online-mpc", context=ctx).summary["rmse"]
    print(f"zero disturbance: nominal {nominal:.5f}, online {online:.5f}")
    assert online <= nominal + 1e-3


def test_lateral_force_paired_comparison():
    sc = small_scenario({"kind": "constant_world_wrench", "wrench": [0, 0, 0, 0, 10.0, 0]},
                        duration=60.0)
    ctx = prepare(sc)
    nominal = run_trial(sc, "mpc", context=ctx).summary
    online = run_trial(sc, "online-mpc", context=ctx).summary
    print(f"10 N lateral: mean offset nominal {nominal['mean_error']:.4f} m, "
          f"online {online['mean_error']:.4f} m")
    assert nominal["mean_error"] > online["mean_error"]


def test_all_controllers_track():
    sc = small_scenario({"kind": "wind", "speed": 1.0}, duration=20.0)
    ctx = prepare(sc)
    rmse = {}
    for c in ("pid", "mpc", "l1-mpc", "online-mpc"):
        r = run_trial(sc, c, context=ctx)
        print(f"{c}: rmse {r.summary['rmse']:.4f}")
        assert not r.aborted
        rmse[c] = r.summary["rmse"]
    assert max(rmse["mpc"], rmse["l1-mpc"], rmse["online-mpc"]) < 0.5
    # the PID baseline settles slowest but stays bounded
    assert rmse["mpc"] < rmse["pid"] < 2.0


def test_unknown_controller():
    with pytest.raises(ValueError):
        run_trial(small_scenario(duration=1.0), "lqr")


# dataset collection

def test_collect_counts_rows():
    sc = small_scenario(duration=2.0, trials=3)
    ds = collect_dataset(sc)
    assert len(ds) == 3 * 2.0 * 50
    assert ds.metadata["rounds"] == 3 and ds.metadata["seed"] == 7


def test_collect_zero_residual_regime():
    sc = small_scenario(trajectory={"kind": "zigzag", "amplitude": 0.0, "duration": 10.0},
                        initial_offset=False, trials=2)
    ds = collect_dataset(sc)
    print(f"max |h| = {np.abs(ds.H).max():.2e}")
    assert np.abs(ds.H).max() <= 1e-9


def test_collect_sinusoidal_peak():
    f0 = 0.2  # Hz
    sc = small_scenario({"kind": "sinusoidal_wrench", "amplitude": [0, 0, 0, 0, 4.0, 0],
                         "frequency": [0, 0, 0, 0, f0, 0]}, duration=40.0,
                        initial_offset=False)
    ds = collect_dataset(sc, rounds=1)
    h = ds.H[:, 10] - ds.H[:, 10].mean()
    spectrum = np.abs(np.fft.rfft(h))
    freqs = np.fft.rfftfreq(len(h), sc.control_dt)
    peak = freqs[np.argmax(spectrum)]
    assert abs(peak - f0) <= freqs[1]


def test_collect_rejects_pid():
    with pytest.raises(ValueError):
        collect_dataset(small_scenario(duration=1.0), controller="pid")


# reports

def fake_result(controller, disturbance, trial, rmse):
    summary = {"rmse": rmse, "rmse_literal": rmse, "mean_error": rmse, "max_error": rmse,
               "saturation_fraction": 0.0, "aborted": False, "cycles": 10}
    return RunResult(controller, disturbance, trial, {}, summary)


def test_report_statistics(tmp_path):
    results = [fake_result("mpc", "calm", 0, 1.0), fake_result("mpc", "calm", 1, 2.0),
               fake_result("pid", "calm", 0, 3.0)]
    write_summary(results, tmp_path / "summary.csv")
    rows = read_summary(tmp_path / "summary.csv")
    _, _, table = aggregate(rows)
    assert table[("mpc", "calm")]["mean"] == 1.5
    assert table[("mpc", "calm")]["std"] == 0.5
    assert table[("pid", "calm")]["std"] == 0.0


def test_report_row_order_follows_declaration():
    rows = [{"controller": c, "disturbance": "d", "trial": 0, "rmse": 1.0, "aborted": 0.0}
            for c in ("pid", "mpc", "online-mpc")]
    ctrl, _, table = aggregate(rows, controllers=["online-mpc", "mpc", "pid"])
    assert ctrl == ["online-mpc", "mpc", "pid"]
    text = format_table(ctrl, ["d"], table)
    assert [line.split()[0] for line in text.splitlines()[1:]] == ctrl


def test_report_excludes_aborted_runs():
    rows = [{"controller": "mpc", "disturbance": "d", "trial": t, "rmse": v, "aborted": a}
            for t, (v, a) in enumerate([(1.0, 0.0), (float("nan"), 1.0)])]
    _, _, table = aggregate(rows)
    assert table[("mpc", "d")] == {"mean": 1.0, "std": 0.0, "n": 1, "aborted": 1}


# command line

CLI_SCENARIO = {
    "schema": SCHEMA, "name": "cli-test",
    "trajectory": {"kind": "zigzag", "duration": 2.0},
    "disturbances": [{"kind": "wind", "speed": 0.0, "label": "calm"},
                     {"kind": "wind", "speed": 2.0, "label": "windy"}],
    "controllers": ["pid", "mpc", "l1-mpc", "online-mpc"], "trials": 2, "seed": 11,
}


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "cli.yaml"
    path.write_text(yaml.safe_dump(CLI_SCENARIO))
    return path


def test_cli_run_is_byte_identical(scenario_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--scenario", str(scenario_file), "--out", str(a), "--quiet"]) == 0
    assert main(["run", "--scenario", str(scenario_file), "--out", str(b), "--quiet",
                 "--jobs", "2"]) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert Path("timing.csv") in files
    runs = [f for f in files if f.parts[0] == "runs"]
    assert len(runs) == 4 * 2 * 2
    for f in files:
        if f.name != "timing.csv":
            assert filecmp.cmp(a / f, b / f, shallow=False), f
    table = (a / "table.txt").read_text()
    assert [line.split()[0] for line in table.splitlines()[1:5]] == CLI_SCENARIO["controllers"]
    assert "rmse_literal" in table


def test_cli_seed_and_trials_override(scenario_file, tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--scenario", str(scenario_file), "--out", str(out), "--quiet",
                 "--seed", "3", "--trials", "1", "--no-trajectories"]) == 0
    rows = read_summary(out / "summary.csv")
    assert len(rows) == 4 * 2
    assert yaml.safe_load((out / "scenario.yaml").read_text())["seed"] == 3
    assert not (out / "runs").exists()


def test_cli_report_rebuilds_tables(scenario_file, tmp_path):
    out = tmp_path / "r"
    main(["run", "--scenario", str(scenario_file), "--out", str(out), "--quiet",
          "--trials", "1", "--no-trajectories"])
    before = (out / "table.csv").read_bytes()
    (out / "table.csv").unlink()
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "table.csv").read_bytes() == before


def test_cli_collect_extract_and_tune(scenario_file, tmp_path, capsys):
    ds_path = tmp_path / "data" / "ds.csv"
    assert main(["collect", "--scenario", str(scenario_file), "--out", str(ds_path),
                 "--trials", "2"]) == 0
    ds = ResidualDataset.load(ds_path)
    assert len(ds) == 2 * 100
    cfg = tmp_path / "extract.yaml"
    cfg.write_text(yaml.safe_dump({"variables": [8, 9, 12], "n_frequencies": 8,
                                   "epochs": 1, "count": 10}))
    fmap = tmp_path / "features.txt"
    assert main(["extract", "--dataset", str(ds_path), "--config", str(cfg),
                 "--out", str(fmap)]) == 0
    first = fmap.read_bytes()
    assert main(["extract", "--dataset", str(ds_path), "--config", str(cfg),
                 "--out", str(fmap)]) == 0
    assert fmap.read_bytes() == first
    assert main(["tune", "--scenario", "zigzag", "--out", str(tmp_path / "tune")]) == 0
    text = (tmp_path / "tune" / "tuning.txt").read_text()
    radius = float(text.split("spectral radius (A - B K):")[1].split()[0])
    assert radius < 1.0
    capsys.readouterr()


def test_cli_reports_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema: scenario/9\n")
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "unsupported scenario schema" in capsys.readouterr().err
