"""Convex error-state MPC on SE(3).

The controller tracks a reference ``(X_d, xi_d)`` through the left-invariant
error ``Psi = X_d^-1 X`` with ``psi = log(Psi)``.  Linearizing the error and
the hydrodynamics about the reference twist gives a time-varying affine model
in the state ``x = [psi; xi]``:

    psi_dot = -ad(xi_d) psi + xi - xi_d
    xi_dot  = M^-1 (H xi + b + B_alloc u) + residual

which is discretized with forward Euler and condensed into a QP over the two
propeller thrusts per horizon step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numba
import numpy as np

from . import liegroup as lg
from .qp import SOLVED, AdmmSolver, QpSettings, QuadraticProgram
from .vessel import VesselParams, hydro_wrench

NX = 12
NU = 2
# Error-state indices of planar motion (yaw, x, y errors; r, u, v) and the rest.
PLANAR = np.array([2, 3, 4, 8, 9, 10])
OUT_OF_PLANE = np.array([0, 1, 5, 6, 7, 11])


@dataclass
class ReferenceTrajectory:
    """Reference poses and body twists sampled every ``dt`` seconds.

    Indices past the end clamp to the final pose with zero twist.
    """

    poses: np.ndarray
    twists: np.ndarray
    dt: float

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float)
        self.twists = np.asarray(self.twists, dtype=float)
        if self.poses.shape[0] != self.twists.shape[0]:
            raise ValueError("poses and twists must have the same length")

    def __len__(self):
        return self.poses.shape[0]

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def window(self, k0: int, count: int):
        """Poses and twists for indices ``k0 .. k0+count-1`` with end clamping."""
        idx = np.arange(k0, k0 + count)
        last = len(self) - 1
        poses = self.poses[np.minimum(idx, last)]
        twists = self.twists[np.minimum(idx, last)].copy()
        twists[idx > last] = 0.0
        return poses, twists

    def consistency_error(self) -> float:
        """Max ``|log(X_k^-1 X_k+1) - xi_k dt|`` over consecutive samples."""
        rel = np.einsum("kij,kjl->kil", lg.inverse(self.poses[:-1]), self.poses[1:])
        return float(np.max(np.abs(lg.log_se3(rel) - self.twists[:-1] * self.dt),
                            initial=0.0))


@dataclass(frozen=True)
class ErrorState:
    psi: np.ndarray
    xi: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.psi, self.xi])


def error_state(X, X_d, xi) -> ErrorState:
    """Left-invariant error ``psi = log(X_d^-1 X)`` paired with the body twist."""
    X = np.asarray(X, dtype=float)
    X_d = np.asarray(X_d, dtype=float)
    if X.shape == (4, 4) and X_d.shape == (4, 4):
        Rt = X_d[:3, :3].T
        rel = np.eye(4)
        rel[:3, :3] = Rt @ X[:3, :3]
        rel[:3, 3] = Rt @ (X[:3, 3] - X_d[:3, 3])
    else:
        rel = lg.inverse(X_d) @ X
    psi = lg.log_se3(rel)
    return ErrorState(psi, np.asarray(xi, dtype=float).copy())


def hydro_jacobian(params: VesselParams, xi):
    """Analytic Jacobian of ``ad_xi^T M xi - D(xi) xi``; supports stacks of twists."""
    xi = np.asarray(xi, dtype=float)
    M = params.mass_matrix
    m = xi @ M.T
    adT = np.swapaxes(lg.adjoint_small(xi), -1, -2)
    J = adT @ M
    Sw = lg.hat3(m[..., :3])
    Sv = lg.hat3(m[..., 3:])
    J[..., :3, :3] += Sw
    J[..., :3, 3:] += Sv
    J[..., 3:, :3] += Sv
    diag = params.linear_damping + 2.0 * params.quadratic_damping * np.abs(xi)
    idx = np.arange(6)
    J[..., idx, idx] += diag
    return J


def linearize_hydro(params: VesselParams, xi_d):
    """Return ``(H, b)`` with ``H xi + b`` the first-order model of the wrench at ``xi_d``."""
    xi_d = np.asarray(xi_d, dtype=float)
    H = hydro_jacobian(params, xi_d)
    b = hydro_wrench(params, xi_d) - np.einsum("...ij,...j->...i", H, xi_d)
    return H, b


def continuous_model(params: VesselParams, xi_d):
    """Continuous ``(A_t, B_t, h_t)`` of the error-state model at reference twist(s)."""
    xi_d = np.asarray(xi_d, dtype=float)
    Minv = params.mass_inverse
    H, b = linearize_hydro(params, xi_d)
    shape = xi_d.shape[:-1]
    A = np.zeros(shape + (NX, NX))
    A[..., :6, :6] = -lg.adjoint_small(xi_d)
    A[..., :6, 6:] = np.eye(6)
    A[..., 6:, 6:] = Minv @ H
    B = np.zeros(shape + (NX, NU))
    B[..., 6:, :] = Minv @ params.allocation
    h = np.concatenate([-xi_d, np.einsum("ij,...j->...i", Minv, b)], axis=-1)
    return A, B, h


def output_map(xi_d):
    """``G`` with ``y = G (x - [0; xi_d]) = [psi; psi_dot]``.

    ``psi_dot`` follows the linearized error dynamics, so the lower block row
    is ``[-ad(xi_d), I]``.
    """
    xi_d = np.asarray(xi_d, dtype=float)
    G = np.zeros(xi_d.shape[:-1] + (NX, NX))
    G[..., :6, :6] = np.eye(6)
    G[..., 6:, :6] = -lg.adjoint_small(xi_d)
    G[..., 6:, 6:] = np.eye(6)
    return G


def feedforward_thrust(params: VesselParams, xi_d, xi_d_next, dt):
    """Least-squares thrust pair reproducing the reference acceleration."""
    xi_d = np.asarray(xi_d, dtype=float)
    accel = (np.asarray(xi_d_next, dtype=float) - xi_d) / dt
    wrench = accel @ params.mass_matrix.T - hydro_wrench(params, xi_d)
    return wrench @ params.allocation_pinv.T


@dataclass
class MpcConfig:
    """Horizon, sample time and weights.

    ``q_psi``/``q_psi_dot`` are the diagonal of the stage weight on
    ``y = [psi; psi_dot]``; ``r`` weights the thrust deviation from the
    reference feedforward.  ``terminal`` is ``"dare"`` (Riccati terminal weight
    on the planar subsystem), ``"stage"`` or an explicit 12x12 matrix on y.
    """

    horizon: int = 30
    dt: float = 0.02
    q_psi: tuple = (1.0, 1.0, 0.5, 100.0, 100.0, 1.0)
    q_psi_dot: tuple = (0.1, 0.1, 0.2, 1.0, 1.0, 0.1)
    r: tuple = (1e-3, 1e-3)
    terminal: object = "dare"
    tuning_surge: float = 0.5
    fault_hold_cycles: int = 5
    max_iter: int = 4000

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if min(self.q_psi) < 0 or min(self.q_psi_dot) < 0 or min(self.r) < 0:
            raise ValueError("weights must be non-negative")

    @property
    def Q(self) -> np.ndarray:
        return np.diag(np.concatenate([self.q_psi, self.q_psi_dot]).astype(float))

    @property
    def R(self) -> np.ndarray:
        return np.diag(np.asarray(self.r, dtype=float))

    @classmethod
    def from_dict(cls, doc: dict | None) -> "MpcConfig":
        doc = dict(doc or {})
        for key in ("q_psi", "q_psi_dot", "r"):
            if key in doc:
                doc[key] = tuple(float(v) for v in doc[key])
        if isinstance(doc.get("terminal"), list):
            doc["terminal"] = np.asarray(doc["terminal"], dtype=float)
        return cls(**doc)

    def to_dict(self) -> dict:
        term = self.terminal
        if isinstance(term, np.ndarray):
            term = term.tolist()
        return dict(horizon=self.horizon, dt=self.dt, q_psi=list(self.q_psi),
                    q_psi_dot=list(self.q_psi_dot), r=list(self.r), terminal=term,
                    tuning_surge=self.tuning_surge,
                    fault_hold_cycles=self.fault_hold_cycles, max_iter=self.max_iter)


@dataclass
class LinearizedModel:
    """Discrete horizon model ``x_k+1 = A_k x_k + B_k u_k + h_k + h~_k``."""

    A: np.ndarray
    B: np.ndarray
    h: np.ndarray
    h_residual: np.ndarray
    G: np.ndarray
    d: np.ndarray


class ReferencePlan:
    """Per-sample quantities that depend only on the reference.

    Computed once per trajectory and shared by every cycle (and every trial)
    that tracks it.
    """

    def __init__(self, params: VesselParams, config: MpcConfig,
                 traj: ReferenceTrajectory, terminal_x: np.ndarray):
        n = len(traj) + config.horizon + 1
        poses, twists = traj.window(0, n)
        dt = config.dt
        Ac, Bc, hc = continuous_model(params, twists)
        self.poses = poses
        self.twists = twists
        self.A = np.eye(NX) + Ac * dt
        self.B = Bc[0] * dt
        self.h = hc * dt
        self.G = output_map(twists)
        self.d = np.concatenate([np.zeros_like(twists), twists], axis=-1)
        self.W = np.swapaxes(self.G, -1, -2) @ config.Q @ self.G
        self.W_terminal = terminal_x
        self.target = np.concatenate([np.zeros_like(twists), twists], axis=-1)
        nxt = np.vstack([twists[1:], twists[-1:]])
        self.u_ff = feedforward_thrust(params, twists, nxt, dt)
        self.length = len(traj)
        self.rdiag = np.tile(np.asarray(config.r, dtype=float), config.horizon)
        n_u = NU * config.horizon
        self.lower = np.full(n_u, params.thrust_min)
        self.upper = np.full(n_u, params.thrust_max)
        self.Wt = np.zeros((NX, NX)) if terminal_x is None else np.asarray(terminal_x)
        self.split = self._decoupled()
        if self.split:
            pp = np.ix_(PLANAR, PLANAR)
            oo = np.ix_(OUT_OF_PLANE, OUT_OF_PLANE)
            self.A_p = np.ascontiguousarray(self.A[:, PLANAR][:, :, PLANAR])
            self.A_o = np.ascontiguousarray(self.A[:, OUT_OF_PLANE][:, :, OUT_OF_PLANE])
            self.W_p = np.ascontiguousarray(self.W[:, PLANAR][:, :, PLANAR])
            self.W_o = np.ascontiguousarray(self.W[:, OUT_OF_PLANE][:, :, OUT_OF_PLANE])
            self.B_p = np.ascontiguousarray(self.B[PLANAR])
            self.Wt_p = np.ascontiguousarray(self.Wt[pp])
            self.Wt_o = np.ascontiguousarray(self.Wt[oo])

    def _decoupled(self) -> bool:
        """True when thrusts and planar states never interact with out-of-plane
        states, so the two subsystems can be condensed separately.  Holds by
        reflection symmetry for planar references and a symmetric hull."""
        mats = [self.A, self.W]
        if self.W_terminal is not None:
            mats.append(self.W_terminal[None])
        for M in mats:
            if np.any(M[:, PLANAR][:, :, OUT_OF_PLANE] != 0.0):
                return False
            if np.any(M[:, OUT_OF_PLANE][:, :, PLANAR] != 0.0):
                return False
        return not np.any(self.B[OUT_OF_PLANE] != 0.0)


def _terminal_weight_x(params: VesselParams, config: MpcConfig) -> np.ndarray:
    term = config.terminal
    if isinstance(term, str) and term == "stage":
        return None
    if isinstance(term, str) and term == "dare":
        from .baselines import tune_terminal_weight
        return tune_terminal_weight(params, config).terminal_x
    P_y = np.asarray(term, dtype=float)
    G = output_map(np.array([0.0, 0.0, 0.0, config.tuning_surge, 0.0, 0.0]))
    return G.T @ P_y @ G


@dataclass
class Horizon:
    """Condensed horizon problem plus what is needed to reconstruct states."""

    plan: "ReferencePlan"
    k0: int
    h_residual: np.ndarray
    qp: QuadraticProgram
    x0: np.ndarray
    const: float

    @property
    def model(self) -> LinearizedModel:
        p, N = self.plan, self.h_residual.shape[0]
        sl = slice(self.k0, self.k0 + N)
        return LinearizedModel(A=p.A[sl], B=np.broadcast_to(p.B, (N, NX, NU)), h=p.h[sl],
                               h_residual=self.h_residual, G=p.G[sl], d=p.d[sl])

    def predicted_states(self, U) -> np.ndarray:
        """States ``x_1..x_N`` for the stacked input ``U``."""
        p, N = self.plan, self.h_residual.shape[0]
        sl = slice(self.k0, self.k0 + N)
        return _rollout(p.A[sl], p.B, p.h[sl] + self.h_residual, self.x0,
                        np.asarray(U, dtype=float).reshape(-1, NU))


@numba.njit(cache=True)
def _rollout(A, B, c, x0, U):
    N, nx = c.shape
    out = np.empty((N, nx))
    x = x0.copy()
    for k in range(N):
        xn = c[k].copy()
        for i in range(nx):
            for l in range(nx):
                xn[i] += A[k, i, l] * x[l]
            for j in range(B.shape[1]):
                xn[i] += B[i, j] * U[k, j]
        out[k] = xn
        x = xn
    return out


@numba.njit(cache=True)
def _condense(A, B, c, W, Wt, use_terminal, target, x0, k0, idx):
    """Eliminate the states of ``x_k+1 = A_k x_k + B u_k + c_k`` over a horizon.

    ``A`` and ``W`` are indexed from the reference start ``k0`` (dynamics at
    ``k0+k``, weight of ``x_k+1`` at ``k0+k+1``; ``Wt`` replaces the last weight
    when ``use_terminal``).  ``c`` has one row per horizon step and ``target``
    one row per reference sample; both, and ``x0``, are restricted to the
    state components ``idx``.

    With ``x_k+1 = Gamma_k U + free_k`` and ``e_k = free_k - target_k`` this
    returns ``sum Gamma_k' W_k Gamma_k``, ``sum Gamma_k' W_k e_k`` and
    ``sum e_k' W_k e_k``.  The forward pass builds Gamma_k; the backward pass
    accumulates the adjoint ``Lam_k = W_k Gamma_k + A_k+1' Lam_k+1`` so that
    the Hessian rows of input k are ``B' Lam_k``.
    """
    N = c.shape[0]
    nx = idx.shape[0]
    nu = B.shape[1]
    n = nu * N
    Gam = np.zeros((N, nx, n))
    E = np.empty((N, nx))
    s = np.empty(nx)
    for i in range(nx):
        s[i] = x0[idx[i]]
    for k in range(N):
        cols = nu * k
        Ak = A[k0 + k]
        sn = np.empty(nx)
        for i in range(nx):
            sn[i] = c[k, idx[i]]
        for i in range(nx):
            row = Gam[k, i]
            for l in range(nx):
                a = Ak[i, l]
                if a != 0.0:
                    sn[i] += a * s[l]
                    if k > 0:
                        prev = Gam[k - 1, l]
                        for j in range(cols):
                            row[j] += a * prev[j]
            for j in range(nu):
                row[cols + j] = B[i, j]
        s = sn
        for i in range(nx):
            E[k, i] = s[i] - target[k0 + k + 1, idx[i]]

    HW = np.zeros((n, n))
    gW = np.zeros(n)
    const = 0.0
    Lam = np.zeros((nx, n))
    mu = np.zeros(nx)
    for k in range(N - 1, -1, -1):
        m = nu * k + nu
        if use_terminal and k == N - 1:
            Wk = Wt
        else:
            Wk = W[k0 + k + 1]
        new = np.zeros((nx, n))
        newmu = np.zeros(nx)
        for i in range(nx):
            nrow = new[i]
            for l in range(nx):
                w = Wk[i, l]
                if w != 0.0:
                    grow = Gam[k, l]
                    for j in range(m):
                        nrow[j] += w * grow[j]
                    newmu[i] += w * E[k, l]
        for i in range(nx):
            const += E[k, i] * newmu[i]
        if k < N - 1:
            Ak1 = A[k0 + k + 1]
            for l in range(nx):
                lrow = Lam[l]
                for i in range(nx):
                    a = Ak1[l, i]
                    if a != 0.0:
                        nrow = new[i]
                        for j in range(n):
                            nrow[j] += a * lrow[j]
                        newmu[i] += a * mu[l]
        Lam = new
        mu = newmu
        for q in range(nu):
            r = nu * k + q
            hrow = HW[r]
            for l in range(nx):
                b = B[l, q]
                if b != 0.0:
                    lrow = Lam[l]
                    for j in range(n):
                        hrow[j] += b * lrow[j]
                    gW[r] += b * mu[l]
    for i in range(n):
        for j in range(i):
            v = 0.5 * (HW[i, j] + HW[j, i])
            HW[i, j] = v
            HW[j, i] = v
    return HW, gW, const


_ALL = np.arange(NX)
_NO_INPUT = np.zeros((len(OUT_OF_PLANE), 0))


def build_horizon(params: VesselParams, config: MpcConfig, plan: ReferencePlan,
                  k0: int, x0, residual_forecast=None) -> Horizon:
    """Condense the horizon starting at reference index ``k0`` into a QP over thrusts.

    ``residual_forecast`` holds N continuous-time 12-vectors; they are scaled
    by ``dt`` before entering the discrete dynamics.  When the plan is
    decoupled, the planar subsystem carries all the input dependence and the
    out-of-plane subsystem contributes only a constant.
    """
    N = config.horizon
    sl = slice(k0, k0 + N)
    h = plan.h[sl]
    if residual_forecast is not None:
        h_res = np.asarray(residual_forecast, dtype=float).reshape(N, NX) * config.dt
        c = h + h_res
    else:
        h_res = np.zeros((N, NX))
        c = h
    x0 = np.asarray(x0, dtype=float)
    use_t = plan.W_terminal is not None
    if plan.split:
        HW, gW, const = _condense(plan.A_p, plan.B_p, c, plan.W_p, plan.Wt_p, use_t,
                                  plan.target, x0, k0, PLANAR)
        const += _condense(plan.A_o, _NO_INPUT, c, plan.W_o, plan.Wt_o, use_t,
                           plan.target, x0, k0, OUT_OF_PLANE)[2]
    else:
        HW, gW, const = _condense(plan.A, plan.B, c, plan.W, plan.Wt, use_t,
                                  plan.target, x0, k0, _ALL)
    rdiag = plan.rdiag
    u_ff = plan.u_ff[sl].reshape(-1)
    H = 2.0 * HW
    H.flat[::H.shape[0] + 1] += 2.0 * rdiag
    g = 2.0 * (gW - rdiag * u_ff)
    const += float(u_ff @ (rdiag * u_ff))
    qp = QuadraticProgram.box(H, g, plan.lower, plan.upper, check=False)
    return Horizon(plan, k0, h_res, qp, x0, const)


@dataclass
class ControlOutput:
    tau_body: np.ndarray
    thrusts: np.ndarray
    diagnostics: dict
    predicted: np.ndarray | None = None


def saturate(params: VesselParams, thrusts):
    lo, hi = params.thrust_min, params.thrust_max
    clipped = np.array([min(max(float(t), lo), hi) for t in thrusts])
    return clipped, bool(clipped[0] != thrusts[0] or clipped[1] != thrusts[1])


def allocate(params: VesselParams, wrench):
    """Least-squares (port, starboard) thrusts for a body wrench; only surge and
    yaw are reachable."""
    return params.allocation_pinv @ np.asarray(wrench, dtype=float)


class ErrorStateMpc:
    """Receding-horizon controller; one instance per simulation."""

    def __init__(self, params: VesselParams, config: MpcConfig | None = None,
                 qp_settings: QpSettings | None = None):
        self.params = params
        self.config = config or MpcConfig()
        self.solver = AdmmSolver(qp_settings or QpSettings(max_iter=self.config.max_iter))
        self._terminal_x = _terminal_weight_x(params, self.config)
        self._plan_key = None
        self._plan = None
        self.reset()

    def reset(self):
        self._warm = None
        self._last_thrusts = None
        self._faults = 0
        self.last_horizon = None
        self.last_solution = None

    def plan_for(self, traj: ReferenceTrajectory) -> ReferencePlan:
        key = (id(traj), len(traj))
        if key != self._plan_key:
            self._plan = ReferencePlan(self.params, self.config, traj, self._terminal_x)
            self._plan_key = key
        return self._plan

    def use_plan(self, traj: ReferenceTrajectory, plan: ReferencePlan):
        self._plan_key = (id(traj), len(traj))
        self._plan = plan

    def predicted_states(self):
        """Optimal ``x_1..x_N`` from the most recent successful solve."""
        if self.last_horizon is None or self.last_solution is None:
            return None
        return self.last_horizon.predicted_states(self.last_solution.primal)

    def control_step(self, state, traj: ReferenceTrajectory, residual_forecast=None,
                     k: int | None = None) -> ControlOutput:
        """Solve the horizon for a measured :class:`PlantState` and return the
        first input.  The reference index defaults to ``round(time / dt)``."""
        t_start = time.perf_counter()
        p = self.params
        if k is None:
            k = int(round(state.time / self.config.dt))
        plan = self.plan_for(traj)
        x0 = error_state(state.pose, plan.poses[k], state.twist).vector
        hz = build_horizon(p, self.config, plan, k, x0, residual_forecast)

        warm = None
        if self._warm is not None:
            U, Y = self._warm
            warm = (np.concatenate([U[NU:], U[-NU:]]), np.concatenate([Y[NU:], Y[-NU:]]))
        sol = self.solver.solve(hz.qp, warm)
        diag = {"status": sol.status, "iterations": sol.iterations,
                "primal_residual": sol.primal_residual,
                "dual_residual": sol.dual_residual, "fault": False}
        if sol.status == SOLVED:
            thrusts = sol.primal[:NU].copy()
            self._warm = (sol.primal, sol.dual)
            self._faults = 0
            self.last_horizon = hz
            self.last_solution = sol
            diag["cost"] = sol.objective + hz.const
        else:
            self._faults += 1
            diag["fault"] = True
            diag["cost"] = float("nan")
            self._warm = None
            if self._last_thrusts is not None and self._faults <= self.config.fault_hold_cycles:
                thrusts = self._last_thrusts.copy()
            else:
                thrusts = np.zeros(NU)
        thrusts, saturated = saturate(p, thrusts)
        self._last_thrusts = thrusts
        tau = p.allocation @ thrusts
        diag["saturated"] = saturated
        diag["consecutive_faults"] = self._faults
        diag["solve_time"] = time.perf_counter() - t_start
        if residual_forecast is not None:
            diag["forecast_norm"] = float(np.linalg.norm(residual_forecast))
        return ControlOutput(tau, thrusts, diag)
