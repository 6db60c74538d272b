"""Closed-loop trials: plant, controller and (optionally) the online learner."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import liegroup as lg
from ..baselines import L1Augmenter, PidController, pose_error_planar
from ..learner import FeatureMap, OnlineLearner, default_feature_map, horizon_inputs, \
    learner_input
from ..mpc import NX, ErrorStateMpc, ReferencePlan, ReferenceTrajectory, error_state, \
    saturate, _terminal_weight_x
from ..vessel import PlantState, VesselParams, default_params, load_params, step
from .metrics import planar_errors, sample_initial_offset, summarize, trial_rng
from .reference import make_reference
from .scenario import CONTROLLERS, DisturbanceCase, Scenario

LOG_COLUMNS = (
    ["time", "ref_x", "ref_y", "ref_yaw", "x", "y", "yaw", "p", "q", "r", "u", "v", "w",
     "thrust_port", "thrust_starboard", "error", "cycle_time", "iterations", "fault",
     "saturated"]
    + [f"residual_{i}" for i in range(NX)]
    + [f"forecast_{i}" for i in range(NX)]
)


@dataclass
class RunResult:
    controller: str
    disturbance: str
    trial: int
    log: dict
    summary: dict
    aborted: bool = False
    learner: dict | None = None
    dataset: tuple | None = None

    def rows(self):
        cols = [np.asarray(self.log[c], dtype=float) for c in LOG_COLUMNS]
        return np.column_stack(cols)


@dataclass
class TrialContext:
    """Per-scenario objects shared by every trial: vessel, reference and MPC plan."""

    params: VesselParams
    traj: ReferenceTrajectory
    plan: ReferencePlan
    feature_map: FeatureMap | None
    extras: dict = field(default_factory=dict)


def prepare(scenario: Scenario) -> TrialContext:
    vessel = scenario.resolve(scenario.vessel)
    params = default_params() if vessel is None else load_params(vessel)
    opts = dict(scenario.trajectory_options)
    if "path" in opts:
        opts["path"] = scenario.resolve(opts["path"])
    traj = make_reference(scenario.trajectory, scenario.duration, scenario.control_dt,
                          tail=scenario.mpc.horizon * scenario.control_dt, **opts)
    terminal = _terminal_weight_x(params, scenario.mpc)
    plan = ReferencePlan(params, scenario.mpc, traj, terminal)
    fm = None
    if "online-mpc" in scenario.controllers:
        path = scenario.resolve(scenario.feature_map)
        fm = default_feature_map() if path is None else FeatureMap.load(path)
    return TrialContext(params, traj, plan, fm)


def initial_state(scenario: Scenario, traj: ReferenceTrajectory, trial: int) -> PlantState:
    """Reference start pose shifted by the sampled planar offset, moving at the
    reference twist."""
    pose = traj.poses[0].copy()
    if scenario.initial_offset:
        rng = trial_rng(scenario.seed, trial)
        pose[:3, 3] += sample_initial_offset(rng, scenario.offset_radius)
    return PlantState(pose, traj.twists[0].copy(), 0.0)


def _predicted_inputs(plan, k, N, dt, state, x, x_pred, pose_input):
    """Learner inputs along the horizon: the measured state ``x`` at ``k`` and
    the previous solution's predicted states after it (the reference when
    there is none yet)."""
    times = (k + np.arange(N)) * dt
    if x_pred is None:
        psi = np.zeros((N, 6))
        xi = plan.twists[k:k + N].copy()
    else:
        psi = x_pred[:N, :6].copy()
        xi = x_pred[:N, 6:].copy()
    psi[0] = x[:6]
    xi[0] = x[6:]
    if pose_input == "error":
        return np.concatenate([psi, xi, times[:, None]], axis=1)
    Z = horizon_inputs(plan.poses[k:k + N], psi, xi, times)
    Z[0, :6] = lg.log_se3(state.pose, strict=False)
    return Z


def _sample_input(state, x, pose_input):
    if pose_input == "error":
        return np.concatenate([x[:6], x[6:], [state.time]])
    return learner_input(state.pose, state.twist, state.time)


def run_trial(scenario: Scenario, controller: str, case: DisturbanceCase | None = None,
              trial: int = 0, context: TrialContext | None = None,
              record_dataset: bool = False) -> RunResult:
    """Simulate one closed-loop run; deterministic in ``(scenario.seed, trial)``.

    The plant advances ``scenario.substeps`` RK4 steps per control period with
    the command held.  Runs with more consecutive solver faults than the
    MPC's hold budget stop early and are marked ``aborted``.
    """
    if controller not in CONTROLLERS:
        raise ValueError(f"unknown controller {controller!r}")
    ctx = context or prepare(scenario)
    case = case or scenario.disturbances[0]
    p, traj, plan = ctx.params, ctx.traj, ctx.plan
    dt = scenario.control_dt
    K = scenario.cycles
    N = scenario.mpc.horizon
    dist = case.spec
    noise_rng = trial_rng(scenario.seed, trial, stream=1)
    sigma = scenario.measurement_noise

    mpc = pid = l1 = learner = None
    if controller == "pid":
        pid = PidController(p, scenario.pid)
    else:
        mpc = ErrorStateMpc(p, scenario.mpc)
        mpc.use_plan(traj, plan)
        if controller == "l1-mpc":
            l1 = L1Augmenter(p, scenario.l1)
        if controller == "online-mpc":
            fm = ctx.feature_map if ctx.feature_map is not None else default_feature_map()
            learner = OnlineLearner(fm, scenario.learner)
    pose_input = scenario.learner.pose_input
    want_residual = mpc is not None

    log = {c: np.full(K, np.nan) for c in LOG_COLUMNS}
    dataset_Z = np.zeros((K, 13)) if record_dataset else None
    dataset_h = np.zeros((K, NX)) if record_dataset else None

    state = initial_state(scenario, traj, trial)
    x = error_state(state.pose, plan.poses[0], state.twist).vector
    aborted = False
    n_done = K
    for k in range(K):
        t0 = time.perf_counter()
        forecast = None
        if learner is not None:
            Zs = _predicted_inputs(plan, k, N, dt, state, x, mpc.predicted_states(),
                                   pose_input)
            forecast = learner.forecast(Zs)
        iterations, fault = 0, False
        if pid is not None:
            thrusts = pid.step(pose_error_planar(state.pose, plan.poses[k]), state.twist, dt)
            saturated = False
        else:
            out = mpc.control_step(state, traj, forecast, k)
            thrusts = out.thrusts
            saturated = out.diagnostics["saturated"]
            iterations = out.diagnostics["iterations"]
            fault = out.diagnostics["fault"]
            if out.diagnostics["consecutive_faults"] > scenario.mpc.fault_hold_cycles:
                aborted = True
            if l1 is not None:
                corrected = l1.step(p.allocation @ thrusts, state.twist, dt)
                thrusts, saturated = saturate(p, p.allocation_pinv @ corrected)
                l1.commit(p.allocation @ thrusts, state.twist, dt)
        tau = p.allocation @ thrusts
        cycle = time.perf_counter() - t0

        ref = plan.poses[k]
        log["time"][k] = state.time
        log["ref_x"][k], log["ref_y"][k] = ref[0, 3], ref[1, 3]
        log["ref_yaw"][k] = lg.heading(ref)
        log["x"][k], log["y"][k] = state.pose[0, 3], state.pose[1, 3]
        log["yaw"][k] = lg.heading(state.pose)
        for i, name in enumerate(("p", "q", "r", "u", "v", "w")):
            log[name][k] = state.twist[i]
        log["thrust_port"][k], log["thrust_starboard"][k] = thrusts
        log["iterations"][k] = iterations
        log["fault"][k] = fault
        log["saturated"][k] = saturated
        if forecast is not None:
            for i in range(NX):
                log[f"forecast_{i}"][k] = forecast[0, i]

        if aborted:
            log["cycle_time"][k] = cycle
            n_done = k + 1
            break

        Z_k = _sample_input(state, x, pose_input) if (learner is not None or record_dataset) else None
        state = step(p, state, tau, dist, scenario.plant_dt, scenario.substeps)
        x_next = error_state(state.pose, plan.poses[k + 1], state.twist).vector
        if want_residual:
            t1 = time.perf_counter()
            residual = (x_next - plan.A[k] @ x - plan.B @ thrusts - plan.h[k]) / dt
            if sigma > 0:
                residual = residual + noise_rng.normal(0.0, sigma, NX)
            for i in range(NX):
                log[f"residual_{i}"][k] = residual[i]
            if learner is not None:
                learner.update(Z_k, residual)
            if record_dataset:
                dataset_Z[k] = Z_k
                dataset_h[k] = residual
            cycle += time.perf_counter() - t1
        log["cycle_time"][k] = cycle
        x = x_next

    errors = planar_errors(np.column_stack([log["x"], log["y"]]),
                           np.column_stack([log["ref_x"], log["ref_y"]]))
    log["error"][:] = errors
    if aborted:
        log = {c: v[:n_done] for c, v in log.items()}
        summary = {"rmse": float("nan"), "rmse_literal": float("nan"),
                   "mean_error": float("nan"), "max_error": float("nan"),
                   "saturation_fraction": float(np.mean(log["saturated"]))}
    else:
        summary = summarize(errors, log["saturated"])
    summary["median_cycle_time"] = float(np.median(log["cycle_time"]))
    summary["aborted"] = aborted
    summary["cycles"] = n_done
    result = RunResult(controller, case.label, trial, log, summary, aborted,
                       learner.snapshot() if learner is not None else None)
    if record_dataset:
        result.dataset = (dataset_Z[:n_done], dataset_h[:n_done])
    return result


def collect_dataset(scenario: Scenario, context: TrialContext | None = None,
                    controller: str = "mpc", rounds: int | None = None):
    """Residual dataset from ``rounds`` closed-loop runs (default ``scenario.trials``).

    Round ``i`` uses trial index ``i`` and disturbance case ``i`` modulo the
    number of cases.  Rows follow the extractor's CSV schema.
    """
    from ..extractor import ResidualDataset
    if controller == "pid":
        raise ValueError("residuals are defined against the MPC model; use an MPC controller")
    ctx = context or prepare(scenario)
    rounds = scenario.trials if rounds is None else rounds
    parts = []
    for i in range(rounds):
        case = scenario.disturbances[i % len(scenario.disturbances)]
        res = run_trial(scenario, controller, case, i, ctx, record_dataset=True)
        parts.append(ResidualDataset(*res.dataset))
    meta = {"scenario": scenario.name, "seed": scenario.seed, "rounds": rounds,
            "controller": controller,
            "disturbances": "; ".join(c.label for c in scenario.disturbances)}
    return ResidualDataset.concatenate(parts, meta)
