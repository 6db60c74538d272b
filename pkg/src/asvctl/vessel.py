"""Six-DOF Fossen vessel model in Lie-group twist ordering.

The equations of motion are written in the Euler-Poincare form

    M xi_dot = ad_xi^T M xi - D(xi_r) xi_r + tau + tau_dist,
    X_dot    = X hat(xi),

with ``M = M_RB + M_AM``, ``xi = [p, q, r, u, v, w]`` in the body frame and
``xi_r = xi - xi_c`` the twist relative to the ocean current.  Hydrostatic
restoring is omitted (neutral buoyancy).

Damping coefficients are stored as Fossen hydrodynamic derivatives, which are
negative for a dissipative hull (e.g. ``X_u = -8``).  ``damping_matrix``
negates them, so ``D`` has a non-negative diagonal and the damping force
``-D(xi) xi`` always opposes motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from numba import njit

from . import liegroup as lg

# Ordering shared by linear_damping / quadratic_damping.
DAMPING_NAMES = ("K_p", "M_q", "N_r", "X_u", "Y_v", "Z_w")
QUADRATIC_DAMPING_NAMES = ("K_pp", "M_qq", "N_rr", "X_uu", "Y_vv", "Z_ww")
DOF_NAMES = ("roll", "pitch", "yaw", "surge", "sway", "heave")
YAW, SURGE, SWAY = 2, 3, 4

_MAX_MASS_CONDITION = 1e12


class SingularMass(ValueError):
    """Combined mass matrix is not safely invertible."""


@dataclass(frozen=True)
class VesselParams:
    """Vessel inertia, damping and actuation.

    Units: mass kg; cog_offset m; inertia kg m^2 (about the body origin);
    added_mass in kg / kg m / kg m^2 blocks matching the twist ordering;
    linear damping N s/m or N m s/rad; quadratic damping N s^2/m^2 or
    N m s^2/rad^2; lever arm m; thrust limits N per propeller.
    """

    mass: float
    inertia: np.ndarray
    added_mass: np.ndarray
    linear_damping: np.ndarray
    quadratic_damping: np.ndarray
    cog_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lever_arm: float = 0.3
    thrust_min: float = -26.0
    thrust_max: float = 50.0

    def __post_init__(self):
        conv = {
            "inertia": (3, 3),
            "added_mass": (6, 6),
            "linear_damping": (6,),
            "quadratic_damping": (6,),
            "cog_offset": (3,),
        }
        for name, shape in conv.items():
            value = np.array(getattr(self, name), dtype=float)
            if value.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {value.shape}")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if not self.mass > 0.0:
            raise ValueError("mass must be positive")
        if not self.thrust_min < 0.0 < self.thrust_max:
            raise ValueError("thrust limits must satisfy thrust_min < 0 < thrust_max")
        if self.lever_arm <= 0.0:
            raise ValueError("lever_arm must be positive")
        if np.any(self.linear_damping > 0.0) or np.any(self.quadratic_damping > 0.0):
            raise ValueError(
                "damping derivatives must be <= 0 (Fossen sign convention)"
            )

    @cached_property
    def rigid_body_mass(self) -> np.ndarray:
        m = self.mass
        S = lg.hat3(self.cog_offset)
        out = np.zeros((6, 6))
        out[:3, :3] = self.inertia
        out[:3, 3:] = m * S
        out[3:, :3] = -m * S
        out[3:, 3:] = m * np.eye(3)
        return out

    @cached_property
    def mass_matrix(self) -> np.ndarray:
        M = self.rigid_body_mass + self.added_mass
        M.setflags(write=False)
        return M

    @cached_property
    def mass_inverse(self) -> np.ndarray:
        M = self.mass_matrix
        if not np.allclose(M, M.T, atol=1e-9):
            raise SingularMass("combined mass matrix is not symmetric")
        cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > _MAX_MASS_CONDITION:
            raise SingularMass(f"mass matrix condition number {cond:.3e} too large")
        Minv = np.linalg.inv(M)
        Minv.setflags(write=False)
        return Minv

    @cached_property
    def allocation(self) -> np.ndarray:
        """6x2 map from (port, starboard) thrusts to a body wrench."""
        B = np.zeros((6, 2))
        B[SURGE] = [1.0, 1.0]
        B[YAW] = [-self.lever_arm, self.lever_arm]
        B.setflags(write=False)
        return B

    @cached_property
    def allocation_pinv(self) -> np.ndarray:
        return np.linalg.pinv(self.allocation)

    def kinetic_energy(self, xi) -> float:
        xi = np.asarray(xi, dtype=float)
        return 0.5 * float(xi @ self.mass_matrix @ xi)

    # -- serialization -------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "VesselParams":
        inertia = doc["inertia"]
        if isinstance(inertia, dict):
            inertia = np.diag([inertia["Ixx"], inertia["Iyy"], inertia["Izz"]])
        added = doc["added_mass"]
        if isinstance(added, dict):
            added = np.diag([added[k] for k in DOF_NAMES])
        lin = doc["linear_damping"]
        if isinstance(lin, dict):
            lin = [lin[k] for k in DAMPING_NAMES]
        quad = doc["quadratic_damping"]
        if isinstance(quad, dict):
            quad = [quad[k] for k in QUADRATIC_DAMPING_NAMES]
        return cls(
            mass=float(doc["mass"]),
            inertia=np.asarray(inertia, dtype=float),
            added_mass=np.asarray(added, dtype=float),
            linear_damping=np.asarray(lin, dtype=float),
            quadratic_damping=np.asarray(quad, dtype=float),
            cog_offset=np.asarray(doc.get("cog_offset", [0.0, 0.0, 0.0]), dtype=float),
            lever_arm=float(doc.get("lever_arm", 0.3)),
            thrust_min=float(doc.get("thrust_min", -26.0)),
            thrust_max=float(doc.get("thrust_max", 50.0)),
        )

    def to_dict(self) -> dict:
        return {
            "mass": self.mass,
            "cog_offset": self.cog_offset.tolist(),
            "inertia": self.inertia.tolist(),
            "added_mass": self.added_mass.tolist(),
            "linear_damping": dict(zip(DAMPING_NAMES, self.linear_damping.tolist())),
            "quadratic_damping": dict(
                zip(QUADRATIC_DAMPING_NAMES, self.quadratic_damping.tolist())
            ),
            "lever_arm": self.lever_arm,
            "thrust_min": self.thrust_min,
            "thrust_max": self.thrust_max,
        }


def load_params(path=None) -> VesselParams:
    """Load a vessel parameter YAML file; ``None`` gives the packaged default."""
    if path is None:
        text = resources.files("asvctl").joinpath("data/vessel_default.yaml").read_text()
    else:
        text = Path(path).read_text()
    return VesselParams.from_dict(yaml.safe_load(text))


def default_params() -> VesselParams:
    return load_params(None)


@dataclass(frozen=True)
class PlantState:
    pose: np.ndarray
    twist: np.ndarray
    time: float = 0.0

    @classmethod
    def at_rest(cls, pose=None, twist=None, time=0.0):
        pose = np.eye(4) if pose is None else np.asarray(pose, dtype=float)
        twist = np.zeros(6) if twist is None else np.asarray(twist, dtype=float)
        return cls(pose, twist, float(time))


DISTURBANCE_KINDS = (
    "none",
    "constant_world_wrench",
    "wind_field",
    "sinusoidal_wrench",
    "current",
)


@dataclass(frozen=True)
class DisturbanceSpec:
    """External disturbance acting on the plant.

    ``constant_world_wrench`` uses ``wrench`` ([moment; force] in the world
    frame).  ``wind_field`` uses ``wind_velocity`` (world, m/s) and
    ``drag_gain`` (N s^2/m^2): force = gain |v_rel| v_rel with v_rel the wind
    velocity relative to the hull.  ``sinusoidal_wrench`` evaluates
    ``amplitude * sin(2 pi frequency t + phase)`` per axis (frequency in Hz) in
    ``frame``.  ``current`` is a world-frame water velocity that only enters the
    damping through the relative twist.
    """

    kind: str = "none"
    wrench: np.ndarray = field(default_factory=lambda: np.zeros(6))
    wind_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    drag_gain: float = 0.0
    amplitude: np.ndarray = field(default_factory=lambda: np.zeros(6))
    frequency: np.ndarray = field(default_factory=lambda: np.zeros(6))
    phase: np.ndarray = field(default_factory=lambda: np.zeros(6))
    frame: str = "body"
    current: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        for name, size in (("wrench", 6), ("wind_velocity", 3), ("amplitude", 6),
                           ("frequency", 6), ("phase", 6), ("current", 3)):
            value = np.array(getattr(self, name), dtype=float).reshape(size)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if np.any(self.frequency < 0.0):
            raise ValueError("frequencies must be non-negative")
        if self.drag_gain < 0.0:
            raise ValueError("drag_gain must be non-negative")
        if self.frame not in ("body", "world"):
            raise ValueError("frame must be 'body' or 'world'")

    @classmethod
    def from_dict(cls, doc: dict | None) -> "DisturbanceSpec":
        if not doc:
            return cls()
        return cls(**doc)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "constant_world_wrench":
            out["wrench"] = self.wrench.tolist()
        elif self.kind == "wind_field":
            out["wind_velocity"] = self.wind_velocity.tolist()
            out["drag_gain"] = self.drag_gain
        elif self.kind == "sinusoidal_wrench":
            out.update(amplitude=self.amplitude.tolist(),
                       frequency=self.frequency.tolist(),
                       phase=self.phase.tolist(), frame=self.frame)
        elif self.kind == "current":
            out["current"] = self.current.tolist()
        return out


NO_DISTURBANCE = DisturbanceSpec()


def wind(speed: float, direction=(0.0, 1.0, 0.0), drag_gain: float = 1.5):
    """Uniform wind of ``speed`` m/s blowing along world ``direction``."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    return DisturbanceSpec(kind="wind_field", wind_velocity=speed * d,
                           drag_gain=drag_gain)


def _world_to_body(R, wrench):
    return np.concatenate([R.T @ wrench[:3], R.T @ wrench[3:]])


def _disturbance(dist: DisturbanceSpec, R, xi, t):
    kind = dist.kind
    if kind == "none" or kind == "current":
        return None
    if kind == "constant_world_wrench":
        return _world_to_body(R, dist.wrench)
    if kind == "wind_field":
        v_rel = dist.wind_velocity - R @ xi[3:]
        force_world = dist.drag_gain * math.sqrt(float(v_rel @ v_rel)) * v_rel
        out = np.zeros(6)
        out[3:] = R.T @ force_world
        return out
    # sinusoidal_wrench
    w = dist.amplitude * np.sin(2.0 * np.pi * dist.frequency * t + dist.phase)
    return _world_to_body(R, w) if dist.frame == "world" else w


def disturbance_body_wrench(dist: DisturbanceSpec, state: PlantState) -> np.ndarray:
    """Disturbance wrench ``[moment; force]`` expressed in the body frame."""
    out = _disturbance(dist, state.pose[:3, :3], np.asarray(state.twist, float),
                       state.time)
    return np.zeros(6) if out is None else out


def relative_twist(dist: DisturbanceSpec, R, xi):
    if dist.kind != "current":
        return xi
    xi_r = np.array(xi, dtype=float)
    xi_r[3:] -= R.T @ dist.current
    return xi_r


def coadjoint(xi, m):
    """``ad_xi^T m`` for twist(s) ``xi`` and wrench(es) ``m``."""
    xi = np.asarray(xi, dtype=float)
    m = np.asarray(m, dtype=float)
    if xi.shape == (6,) and m.shape == (6,):
        wx, wy, wz, vx, vy, vz = xi.tolist()
        a, b, c, d, e, f = m.tolist()
        return np.array([b * wz - c * wy + e * vz - f * vy,
                         c * wx - a * wz + f * vx - d * vz,
                         a * wy - b * wx + d * vy - e * vx,
                         e * wz - f * wy, f * wx - d * wz, d * wy - e * wx])
    w, v = xi[..., :3], xi[..., 3:]
    mw, mv = m[..., :3], m[..., 3:]
    return np.concatenate([np.cross(mw, w) + np.cross(mv, v), np.cross(mv, w)],
                          axis=-1)


def coriolis_wrench(params: VesselParams, xi) -> np.ndarray:
    """Coriolis/centripetal wrench ``ad_xi^T M xi`` (power neutral)."""
    xi = np.asarray(xi, dtype=float)
    return coadjoint(xi, xi @ params.mass_matrix.T)


def damping_matrix(params: VesselParams, xi_r) -> np.ndarray:
    """Diagonal ``D(xi_r) = -diag(linear) - diag(quadratic * |xi_r|)``."""
    xi_r = np.asarray(xi_r, dtype=float)
    return np.diag(-params.linear_damping - params.quadratic_damping * np.abs(xi_r))


def damping_wrench(params: VesselParams, xi_r) -> np.ndarray:
    """``-D(xi_r) xi_r``; supports stacked twists."""
    xi_r = np.asarray(xi_r, dtype=float)
    return (params.linear_damping + params.quadratic_damping * np.abs(xi_r)) * xi_r


def hydro_wrench(params: VesselParams, xi) -> np.ndarray:
    """Nominal unforced wrench ``ad_xi^T M xi - D(xi) xi``."""
    return coriolis_wrench(params, xi) + damping_wrench(params, xi)


def _twist_rate(params, R, xi, tau, dist, t):
    f = coriolis_wrench(params, xi) + damping_wrench(params, relative_twist(dist, R, xi))
    f = f + tau
    d = _disturbance(dist, R, xi, t)
    if d is not None:
        f = f + d
    return params.mass_inverse @ f


def continuous_dynamics(params: VesselParams, state: PlantState, tau,
                        dist: DisturbanceSpec = NO_DISTURBANCE):
    """Return ``(pose_rate, twist_rate)``; pose_rate is the 4x4 ``X hat(xi)``."""
    X = np.asarray(state.pose, dtype=float)
    xi = np.asarray(state.twist, dtype=float)
    tau = np.asarray(tau, dtype=float)
    twist_rate = _twist_rate(params, X[:3, :3], xi, tau, dist, state.time)
    return X @ lg.hat6(xi), twist_rate


_KIND_CODE = {kind: i for i, kind in enumerate(DISTURBANCE_KINDS)}


@njit(cache=True)
def _cross(a, b, out, k):
    out[k] = a[1] * b[2] - a[2] * b[1]
    out[k + 1] = a[2] * b[0] - a[0] * b[2]
    out[k + 2] = a[0] * b[1] - a[1] * b[0]


@njit(cache=True)
def _rates_kernel(X, xi, tau, t, M, Minv, lin, quad, kind, dvec, gain, frame,
                  dX, dxi):
    # dvec packs [wrench(6) | wind(3) | amplitude(6) | frequency(6) | phase(6) | current(3)]
    R = X[:3, :3].copy()
    m = M @ xi
    f = np.zeros(6)
    tmp = np.zeros(3)
    _cross(m[:3], xi[:3], f, 0)
    _cross(m[3:], xi[3:], tmp, 0)
    f[0] += tmp[0]
    f[1] += tmp[1]
    f[2] += tmp[2]
    _cross(m[3:], xi[:3], f, 3)
    xr = xi.copy()
    if kind == 4:
        xr[3:] -= R.T @ dvec[27:30]
    for i in range(6):
        f[i] += (lin[i] + quad[i] * abs(xr[i])) * xr[i] + tau[i]
    if kind == 1:
        f[:3] += R.T @ dvec[0:3]
        f[3:] += R.T @ dvec[3:6]
    elif kind == 2:
        v_rel = dvec[6:9] - R @ xi[3:]
        speed = np.sqrt(v_rel[0] ** 2 + v_rel[1] ** 2 + v_rel[2] ** 2)
        f[3:] += R.T @ (gain * speed * v_rel)
    elif kind == 3:
        w = np.empty(6)
        for i in range(6):
            w[i] = dvec[9 + i] * np.sin(2.0 * np.pi * dvec[15 + i] * t + dvec[21 + i])
        if frame == 1:
            f[:3] += R.T @ w[:3]
            f[3:] += R.T @ w[3:]
        else:
            f += w
    dxi[:] = Minv @ f
    W = np.zeros((3, 3))
    W[0, 1] = -xi[2]
    W[0, 2] = xi[1]
    W[1, 0] = xi[2]
    W[1, 2] = -xi[0]
    W[2, 0] = -xi[1]
    W[2, 1] = xi[0]
    dX[:3, :3] = R @ W
    dX[:3, 3] = R @ xi[3:]


@njit(cache=True)
def _rk4_kernel(X0, xi0, tau, t0, dt, n_steps, M, Minv, lin, quad, kind, dvec,
                gain, frame):
    X = X0.copy()
    xi = xi0.copy()
    t = t0
    k1x = np.zeros((4, 4))
    k2x = np.zeros((4, 4))
    k3x = np.zeros((4, 4))
    k4x = np.zeros((4, 4))
    k1v = np.zeros(6)
    k2v = np.zeros(6)
    k3v = np.zeros(6)
    k4v = np.zeros(6)
    h = 0.5 * dt
    for _ in range(n_steps):
        _rates_kernel(X, xi, tau, t, M, Minv, lin, quad, kind, dvec, gain, frame,
                      k1x, k1v)
        _rates_kernel(X + h * k1x, xi + h * k1v, tau, t + h, M, Minv, lin, quad,
                      kind, dvec, gain, frame, k2x, k2v)
        _rates_kernel(X + h * k2x, xi + h * k2v, tau, t + h, M, Minv, lin, quad,
                      kind, dvec, gain, frame, k3x, k3v)
        _rates_kernel(X + dt * k3x, xi + dt * k3v, tau, t + dt, M, Minv, lin,
                      quad, kind, dvec, gain, frame, k4x, k4v)
        X = X + (dt / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        xi = xi + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        R = X[:3, :3].copy()
        X[:3, :3] = 0.5 * R @ (3.0 * np.eye(3) - R.T @ R)
        X[3, 0] = 0.0
        X[3, 1] = 0.0
        X[3, 2] = 0.0
        X[3, 3] = 1.0
        t = t0 + dt * (_ + 1)
    return X, xi


_PACK_CACHE: dict = {}


def _packed(dist: DisturbanceSpec):
    key = id(dist)
    hit = _PACK_CACHE.get(key)
    if hit is not None and hit[0] is dist:
        return hit[1]
    dvec = np.concatenate([dist.wrench, dist.wind_velocity, dist.amplitude,
                           dist.frequency, dist.phase, dist.current])
    packed = (_KIND_CODE[dist.kind], dvec, float(dist.drag_gain),
              int(dist.frame == "world"))
    if len(_PACK_CACHE) > 64:
        _PACK_CACHE.clear()
    _PACK_CACHE[key] = (dist, packed)
    return packed


def step(params: VesselParams, state: PlantState, tau, dist: DisturbanceSpec,
         dt: float, n_steps: int = 1) -> PlantState:
    """RK4 integration of the coupled pose/twist dynamics with tau held constant.

    The rotation block is re-orthonormalized after every step.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    kind, dvec, gain, frame = _packed(dist)
    X, xi = _rk4_kernel(
        np.ascontiguousarray(state.pose, dtype=float),
        np.ascontiguousarray(state.twist, dtype=float),
        np.ascontiguousarray(tau, dtype=float), float(state.time), float(dt),
        int(n_steps), params.mass_matrix, params.mass_inverse,
        params.linear_damping, params.quadratic_damping, kind, dvec, gain, frame,
    )
    return PlantState(X, xi, state.time + n_steps * dt)


def simulate(params, state, tau, dist, dt, n_steps):
    """Advance ``n_steps`` RK4 steps with a constant input."""
    return step(params, state, tau, dist, dt, n_steps)
