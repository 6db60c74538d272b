"""Comparison controllers and the Riccati-based weight tuning utility."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import liegroup as lg
from .mpc import PLANAR, continuous_model, output_map
from .vessel import VesselParams, hydro_wrench


class NotConverged(RuntimeError):
    pass


class Unstabilizable(RuntimeError):
    pass


@dataclass
class TuningResult:
    P: np.ndarray
    K: np.ndarray
    eigenvalues: np.ndarray
    iterations: int
    residual: float
    terminal_x: np.ndarray | None = None

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.eigenvalues)))

    @property
    def has_complex_pairs(self) -> bool:
        return bool(np.any(np.abs(self.eigenvalues.imag) > 1e-9))

    def advisories(self, margin: float = 0.99) -> list[str]:
        notes = []
        if self.has_complex_pairs:
            notes.append("closed loop has complex-conjugate eigenvalues")
        if np.any(self.eigenvalues.real > margin):
            notes.append(f"closed-loop eigenvalue real part above {margin}")
        return notes


def riccati_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    S = R + BtP @ B
    rhs = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, BtP @ A) + Q
    return float(np.max(np.abs(rhs - P)))


def solve_dare(A, B, Q, R, tol: float = 1e-10, max_iter: int = 100_000) -> TuningResult:
    """Fixed-point iteration of the Riccati recursion from ``P = Q``.

    Convergence is declared when successive iterates differ by at most
    ``tol * max(1, |P|)``.  A divergent or stalled iteration raises
    :class:`Unstabilizable`; running out of iterations raises
    :class:`NotConverged`.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if B.shape[0] != A.shape[0]:
        B = B.reshape(A.shape[0], -1)
    if np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
        raise ValueError("R must be positive definite")
    P = Q.copy()
    best = np.inf
    stall = 0
    for it in range(1, max_iter + 1):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = A.T @ P @ (A - B @ K) + Q
        P_next = 0.5 * (P_next + P_next.T)
        scale = max(1.0, float(np.max(np.abs(P_next))))
        delta = float(np.max(np.abs(P_next - P)))
        P = P_next
        if not np.all(np.isfinite(P)) or scale > 1e15:
            raise Unstabilizable("Riccati iterates diverge; (A, B) is not stabilizable")
        if delta <= tol * scale:
            break
        # a residual that stops shrinking at a large value signals an unstable
        # mode the input cannot reach
        if delta < 0.999 * best:
            best = delta
            stall = 0
        else:
            stall += 1
            if stall > 5000:
                raise Unstabilizable(f"Riccati residual plateaus at {delta:.3e}")
    else:
        raise NotConverged(f"DARE did not converge in {max_iter} iterations")
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    eig = np.linalg.eigvals(A - B @ K)
    return TuningResult(P, K, eig, it, riccati_residual(A, B, Q, R, P))


def planar_model(params: VesselParams, config):
    """Discrete ``(A, B, Q)`` of the planar error subsystem at a straight line.

    The operating point is constant surge at ``config.tuning_surge``; Q is the
    stage weight on ``y`` pulled back to the state.
    """
    xi_d = np.array([0.0, 0.0, 0.0, config.tuning_surge, 0.0, 0.0])
    Ac, Bc, _ = continuous_model(params, xi_d)
    A = np.eye(12) + Ac * config.dt
    B = Bc * config.dt
    G = output_map(xi_d)
    Wx = G.T @ config.Q @ G
    ix = np.ix_(PLANAR, PLANAR)
    return A[ix], B[PLANAR], Wx[ix], Wx


def tune_terminal_weight(params: VesselParams, config) -> TuningResult:
    """DARE on the planar subsystem; the result's ``terminal_x`` embeds P into
    the full 12x12 state weight (stage weight elsewhere)."""
    A, B, Qp, Wx = planar_model(params, config)
    res = solve_dare(A, B, Qp, config.R)
    full = Wx.copy()
    full[np.ix_(PLANAR, PLANAR)] = res.P
    res.terminal_x = 0.5 * (full + full.T)
    return res


# -- PID ------------------------------------------------------------------


@dataclass
class PidGains:
    kp: float
    ki: float
    kd: float
    integral_limit: float


@dataclass
class PidConfig:
    """Two-layer PID.

    The outer loop is proportional with saturation and has no reference
    feedforward: ``v_ref = sat(k_along e_x)`` and
    ``w_ref = sat(k_heading e_psi + k_cross e_y)`` with errors expressed in the
    body frame.  The inner loops output a common surge force and a yaw moment.
    """

    k_along: float = 0.6
    k_cross: float = 0.4
    k_heading: float = 1.0
    max_surge: float = 1.0
    max_yaw_rate: float = 0.4
    surge: PidGains = field(default_factory=lambda: PidGains(60.0, 10.0, 0.0, 2.0))
    yaw: PidGains = field(default_factory=lambda: PidGains(20.0, 4.0, 0.0, 2.0))

    def __post_init__(self):
        for g in (self.surge, self.yaw):
            if not np.all(np.isfinite([g.kp, g.ki, g.kd])):
                raise ValueError("PID gains must be finite")
            if g.integral_limit <= 0:
                raise ValueError("integral clamps must be positive")

    @classmethod
    def from_dict(cls, doc: dict | None) -> "PidConfig":
        doc = dict(doc or {})
        for key in ("surge", "yaw"):
            if key in doc:
                doc[key] = PidGains(**doc[key])
        return cls(**doc)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("k_along", "k_cross", "k_heading", "max_surge", "max_yaw_rate")}
        for key in ("surge", "yaw"):
            g = getattr(self, key)
            out[key] = dict(kp=g.kp, ki=g.ki, kd=g.kd, integral_limit=g.integral_limit)
        return out


def pose_error_planar(pose, pose_ref):
    """``(e_x, e_y, e_psi)``: reference position in the body frame and heading error."""
    R = pose[:3, :3]
    d = R.T @ (pose_ref[:3, 3] - pose[:3, 3])
    e_psi = lg.heading(pose_ref) - lg.heading(pose)
    e_psi = (e_psi + np.pi) % (2.0 * np.pi) - np.pi
    return np.array([d[0], d[1], e_psi])


class PidController:
    def __init__(self, params: VesselParams, config: PidConfig | None = None):
        self.params = params
        self.config = config or PidConfig()
        self.reset()

    def reset(self):
        self.integral = np.zeros(2)
        self.previous_error = None

    def references(self, error):
        c = self.config
        e_x, e_y, e_psi = error
        v_ref = np.clip(c.k_along * e_x, -c.max_surge, c.max_surge)
        w_ref = np.clip(c.k_heading * e_psi + c.k_cross * e_y,
                        -c.max_yaw_rate, c.max_yaw_rate)
        return v_ref, w_ref

    def step(self, error, twist, dt):
        """Thrust pair for a planar pose error and the measured body twist."""
        if not dt > 0:
            raise ValueError("dt must be positive")
        c = self.config
        v_ref, w_ref = self.references(error)
        e = np.array([v_ref - twist[3], w_ref - twist[2]])
        limits = np.array([c.surge.integral_limit, c.yaw.integral_limit])
        self.integral = np.clip(self.integral + e * dt, -limits, limits)
        de = np.zeros(2) if self.previous_error is None else (e - self.previous_error) / dt
        self.previous_error = e
        force = c.surge.kp * e[0] + c.surge.ki * self.integral[0] + c.surge.kd * de[0]
        moment = c.yaw.kp * e[1] + c.yaw.ki * self.integral[1] + c.yaw.kd * de[1]
        return common_differential_to_thrusts(self.params, force, moment)


def common_differential_to_thrusts(params: VesselParams, force, moment):
    lever = params.lever_arm
    thrusts = np.array([0.5 * force - 0.5 * moment / lever,
                        0.5 * force + 0.5 * moment / lever])
    return np.clip(thrusts, params.thrust_min, params.thrust_max)


def pid_step(controller: PidController, error, twist, dt):
    return controller.step(error, twist, dt)


# -- L1 augmentation ---------------------------------------------------------


@dataclass
class L1Config:
    """Predictor pole per axis (1/s, negative), filter bandwidth (rad/s),
    adaptation period (s) and the absolute bound on each wrench estimate."""

    predictor_poles: tuple = (-10.0,) * 6
    bandwidth: float = 1.0
    sample_period: float = 0.02
    bound: float = 100.0

    def __post_init__(self):
        if self.bandwidth < 0:
            raise ValueError("filter bandwidth must be non-negative")
        if np.any(np.asarray(self.predictor_poles) >= 0):
            raise ValueError("predictor gain must be Hurwitz")
        if self.sample_period <= 0 or self.bound <= 0:
            raise ValueError("sample period and bound must be positive")

    @classmethod
    def from_dict(cls, doc: dict | None) -> "L1Config":
        doc = dict(doc or {})
        if "predictor_poles" in doc:
            doc["predictor_poles"] = tuple(float(v) for v in doc["predictor_poles"])
        return cls(**doc)

    def to_dict(self) -> dict:
        return dict(predictor_poles=list(self.predictor_poles), bandwidth=self.bandwidth,
                    sample_period=self.sample_period, bound=self.bound)


class L1Augmenter:
    """Piecewise-constant disturbance estimator with low-pass compensation.

    The predictor advances the twist with the nominal model, the current
    estimate and a stabilizing error injection.  Each sample the estimate is
    reset to the value that explains the latest prediction error exactly, and
    the filtered estimate is subtracted from the nominal wrench.
    """

    def __init__(self, params: VesselParams, config: L1Config | None = None):
        self.params = params
        self.config = config or L1Config()
        self.reset()

    def reset(self):
        self.prediction = None
        self.previous_error = np.zeros(6)
        self.sigma = np.zeros(6)
        self.estimate = np.zeros(6)
        self.filtered = np.zeros(6)

    def _adapt(self, xi, dt):
        p = self.params
        decay = np.exp(np.asarray(self.config.predictor_poles) * dt)
        err = self.prediction - xi
        raw = self.sigma - p.mass_matrix @ (err - decay * self.previous_error) / dt
        self.estimate = np.clip(raw, -self.config.bound, self.config.bound)
        self.sigma = self.estimate - p.mass_matrix @ (decay * err) / dt
        self.previous_error = err
        gain = 1.0 - np.exp(-self.config.bandwidth * dt)
        self.filtered = self.filtered + gain * (self.estimate - self.filtered)
        return decay, err

    def step(self, tau_nominal, xi, dt, tau_applied=None):
        """Corrected wrench; ``tau_applied`` is what the plant will receive
        (defaults to the corrected wrench itself)."""
        if not dt > 0:
            raise ValueError("dt must be positive")
        xi = np.asarray(xi, dtype=float)
        p = self.params
        if self.prediction is None:
            decay = np.exp(np.asarray(self.config.predictor_poles) * dt)
            err = np.zeros(6)
        else:
            decay, err = self._adapt(xi, dt)
        corrected = np.asarray(tau_nominal, dtype=float) - self.filtered
        applied = corrected if tau_applied is None else np.asarray(tau_applied, dtype=float)
        accel = p.mass_inverse @ (hydro_wrench(p, xi) + applied + self.sigma)
        self.prediction = xi + decay * err + dt * accel
        return corrected

    def commit(self, tau_applied, xi, dt):
        """Re-propagate the predictor with the wrench actually applied."""
        p = self.params
        decay = np.exp(np.asarray(self.config.predictor_poles) * dt)
        accel = p.mass_inverse @ (hydro_wrench(p, xi) + tau_applied + self.sigma)
        self.prediction = xi + decay * self.previous_error + dt * accel


def l1_augment_step(augmenter: L1Augmenter, tau_nominal, xi, dt):
    return augmenter.step(tau_nominal, xi, dt)
