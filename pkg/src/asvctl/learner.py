"""Fourier-feature online estimator of the model residual.

The residual ``h`` is the gap between the measured error-state derivative and
the nominal linear model.  It is approximated as ``A^T phi(Z)`` where ``phi``
is a fixed bank of sin/cos features of single input variables and ``A`` is
updated by one gradient step per control cycle on a sliding-buffer loss.

Learner inputs ``Z`` are 13-vectors ``[log(X) (6); twist (6); time]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from . import liegroup as lg

NZ = 13
NH = 12
TRIG = ("sin", "cos")


@dataclass(frozen=True)
class FeatureMap:
    """Selected features; entry ``k`` is ``trig_k(frequency_k * Z[variable_k])``.

    ``variables`` are 0-based indices into ``Z``.  The text file format uses
    1-based indices, one feature per line: ``index, variable, trig, frequency``.
    """

    variables: np.ndarray
    is_sin: np.ndarray
    frequencies: np.ndarray

    def __post_init__(self):
        var = np.array(self.variables, dtype=np.int64).reshape(-1)
        sin = np.array(self.is_sin, dtype=bool).reshape(-1)
        freq = np.array(self.frequencies, dtype=float).reshape(-1)
        if not (len(var) == len(sin) == len(freq)) or len(var) < 1:
            raise ValueError("feature map needs at least one feature with matching fields")
        if np.any(var < 0) or np.any(var >= NZ):
            raise ValueError(f"variable indices must lie in [0, {NZ})")
        if not np.all(np.isfinite(freq)):
            raise ValueError("frequencies must be finite")
        for name, value in (("variables", var), ("is_sin", sin), ("frequencies", freq)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    def __len__(self):
        return len(self.variables)

    @property
    def trig(self) -> list:
        return ["sin" if s else "cos" for s in self.is_sin]

    @classmethod
    def from_pairs(cls, pairs):
        """Both sin and cos for every ``(variable, frequency)`` pair."""
        var, sin, freq = [], [], []
        for v, f in pairs:
            var += [v, v]
            sin += [True, False]
            freq += [f, f]
        return cls(var, sin, freq)

    def evaluate(self, Z) -> np.ndarray:
        """Features for one input (shape ``(F,)``) or a batch (shape ``(n, F)``)."""
        Z = np.asarray(Z, dtype=float)
        if Z.ndim <= 2:
            out = _features(np.ascontiguousarray(Z.reshape(-1, Z.shape[-1])),
                            self.variables, self.is_sin, self.frequencies)
            return out[0] if Z.ndim == 1 else out
        arg = self.frequencies * Z[..., self.variables]
        return np.where(self.is_sin, np.sin(arg), np.cos(arg))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("# index, variable (1-based into Z), trig, frequency\n")
            for k, (v, t, f) in enumerate(zip(self.variables, self.trig, self.frequencies)):
                fh.write(f"{k}, {v + 1}, {t}, {float(f)!r}\n")

    @classmethod
    def load(cls, path) -> "FeatureMap":
        rows = []
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                idx, var, trig, freq = (s.strip() for s in line.split(","))
                if trig not in TRIG:
                    raise ValueError(f"unknown trig {trig!r}")
                rows.append((int(idx), int(var) - 1, trig == "sin", float(freq)))
        rows.sort(key=lambda r: r[0])
        if [r[0] for r in rows] != list(range(len(rows))):
            raise ValueError("feature indices must be 0..F-1 without gaps")
        return cls([r[1] for r in rows], [r[2] for r in rows], [r[3] for r in rows])


@numba.njit(cache=True)
def _features(Z, var, is_sin, freq):
    n, F = Z.shape[0], var.shape[0]
    out = np.empty((n, F))
    for r in range(n):
        for k in range(F):
            a = freq[k] * Z[r, var[k]]
            out[r, k] = math.sin(a) if is_sin[k] else math.cos(a)
    return out


def default_feature_map() -> FeatureMap:
    """The feature map shipped with the package."""
    from importlib.resources import files
    return FeatureMap.load(files("asvctl") / "data" / "features_default.txt")


def evaluate_features(fmap: FeatureMap, Z) -> np.ndarray:
    return fmap.evaluate(Z)


def learner_input(pose, twist, t, reference_pose=None) -> np.ndarray:
    """``Z = [log(X); xi; t]``, batched over leading axes.

    With ``reference_pose`` the pose entry is the error ``log(X_d^-1 X)``
    instead of the absolute pose.  The log is taken in non-strict mode so
    headings past pi wrap instead of raising.
    """
    pose = np.asarray(pose, dtype=float)
    if reference_pose is not None:
        pose = lg.inverse(reference_pose) @ pose
    twist = np.asarray(twist, dtype=float)
    t = np.asarray(t, dtype=float)
    log = lg.log_se3(pose, strict=False)
    return np.concatenate([log, twist, t[..., None]], axis=-1)


@numba.njit(cache=True)
def _exp_se3(xi, R, p):
    wx, wy, wz = xi[0], xi[1], xi[2]
    t2 = wx * wx + wy * wy + wz * wz
    t = math.sqrt(t2)
    if t < lg.SMALL_ANGLE:
        a, b = 1.0 - t2 / 6.0, 0.5 - t2 / 24.0
    else:
        h = math.sin(0.5 * t) / (0.5 * t)
        a, b = math.sin(t) / t, 0.5 * h * h
    if t < lg._SERIES_BAND:
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 ** 3 / 362880.0
    else:
        c = (t - math.sin(t)) / (t2 * t)
    W = np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])
    W2 = W @ W
    for i in range(3):
        for j in range(3):
            e = 1.0 if i == j else 0.0
            R[i, j] = e + a * W[i, j] + b * W2[i, j]
    for i in range(3):
        acc = 0.0
        for j in range(3):
            e = 1.0 if i == j else 0.0
            acc += (e + b * W[i, j] + c * W2[i, j]) * xi[3 + j]
        p[i] = acc


@numba.njit(cache=True)
def _log_se3(R, p, out):
    sx, sy, sz = R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]
    cos_t = min(1.0, max(-1.0, 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)))
    sin_t = 0.5 * math.sqrt(sx * sx + sy * sy + sz * sz)
    t = math.atan2(sin_t, cos_t)
    if t > math.pi - lg._AXIS_BRANCH:
        # axis from the symmetric part, sign from the skew part
        best, k = -1.0, 0
        for i in range(3):
            d = (R[i, i] - cos_t) / (1.0 - cos_t)
            if d > best:
                best, k = d, i
        n = np.empty(3)
        for i in range(3):
            e = 1.0 if i == k else 0.0
            n[i] = (0.5 * (R[i, k] + R[k, i]) - cos_t * e) / (1.0 - cos_t)
        n /= math.sqrt(max(best, 1e-300))
        if n[0] * sx + n[1] * sy + n[2] * sz < 0.0:
            n = -n
        wx, wy, wz = t * n[0], t * n[1], t * n[2]
    else:
        scale = 0.5 + t * t / 12.0 if t < lg.SMALL_ANGLE else 0.5 * t / sin_t
        wx, wy, wz = scale * sx, scale * sy, scale * sz
    t2 = wx * wx + wy * wy + wz * wz
    th = math.sqrt(t2)
    if th < lg._SERIES_BAND:
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        d = (1.0 - 0.5 * th / math.tan(0.5 * th)) / t2
    px, py, pz = p[0], p[1], p[2]
    cx, cy, cz = wy * pz - wz * py, wz * px - wx * pz, wx * py - wy * px
    ccx, ccy, ccz = wy * cz - wz * cy, wz * cx - wx * cz, wx * cy - wy * cx
    out[0], out[1], out[2] = wx, wy, wz
    out[3] = px - 0.5 * cx + d * ccx
    out[4] = py - 0.5 * cy + d * ccy
    out[5] = pz - 0.5 * cz + d * ccz


@numba.njit(cache=True)
def _compose_log(poses, psi):
    n = poses.shape[0]
    out = np.empty((n, 6))
    R = np.empty((3, 3))
    p = np.empty(3)
    Rk = np.empty((3, 3))
    pk = np.empty(3)
    for k in range(n):
        _exp_se3(psi[k], R, p)
        for i in range(3):
            pk[i] = poses[k, i, 3]
            for j in range(3):
                acc = 0.0
                for m in range(3):
                    acc += poses[k, i, m] * R[m, j]
                Rk[i, j] = acc
                pk[i] += poses[k, i, j] * p[j]
        _log_se3(Rk, pk, out[k])
    return out


def horizon_inputs(reference_poses, psi, twists, times) -> np.ndarray:
    """Absolute-pose learner inputs for poses ``X_d exp(psi)`` along a horizon."""
    log = _compose_log(np.ascontiguousarray(reference_poses, dtype=float),
                       np.ascontiguousarray(psi, dtype=float))
    return np.concatenate([log, twists, np.asarray(times, dtype=float)[:, None]], axis=1)


def measure_residual(x, x_next, tau, A, B, h, dt) -> np.ndarray:
    """``(x_next - x)/dt - (A x + B tau + h)`` for the continuous model ``(A, B, h)``.

    ``x`` stacks the log-coordinate pose error and the twist, so the pose part
    of the difference is taken between Lie-algebra vectors.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    return (np.asarray(x_next, dtype=float) - x) / dt - (A @ x + B @ np.asarray(tau, float) + h)


def buffered_loss(A, Phi, H, P, lam) -> float:
    """``(1/S) sum_j |h_j - A^T phi_j|^2 + lam |A^T phi_j - p_j|^2``.

    ``Phi`` is ``(S, F)``, ``H`` the measured residuals and ``P`` the stored
    predictions of each sample's predecessor (``(S, 12)`` each).
    """
    pred = Phi @ A
    S = len(Phi)
    return float((np.sum((H - pred) ** 2) + lam * np.sum((pred - P) ** 2)) / S)


def buffered_loss_gradient(A, Phi, H, P, lam) -> np.ndarray:
    pred = Phi @ A
    return (2.0 / len(Phi)) * Phi.T @ ((1.0 + lam) * pred - H - lam * P)


@dataclass
class LearnerConfig:
    step_size: float = 1e-4
    regularizer: float = 1e-4
    buffer_size: int = 30
    pose_input: str = "absolute"

    def __post_init__(self):
        if self.step_size < 0 or self.regularizer < 0:
            raise ValueError("step size and regularizer must be non-negative")
        if self.buffer_size < 1:
            raise ValueError("buffer size must be positive")
        if self.pose_input not in ("absolute", "error"):
            raise ValueError("pose_input must be 'absolute' or 'error'")

    @classmethod
    def from_dict(cls, doc: dict | None) -> "LearnerConfig":
        return cls(**(doc or {}))

    def to_dict(self) -> dict:
        return dict(step_size=self.step_size, regularizer=self.regularizer,
                    buffer_size=self.buffer_size, pose_input=self.pose_input)


@dataclass
class OnlineLearner:
    """Weights ``A`` (``F x 12``, zero at start) and a ring buffer of samples.

    Each buffer entry keeps the features of ``Z_j``, the measured residual
    ``h_j`` and the prediction stored for sample ``j-1`` at its insertion
    (zero for the first sample).  The fit term is re-evaluated with the
    current weights at every update; the lagged prediction in the smoothness
    term stays as recorded.
    """

    feature_map: FeatureMap
    config: LearnerConfig = field(default_factory=LearnerConfig)

    def __post_init__(self):
        self.reset()

    def reset(self):
        F, N = len(self.feature_map), self.config.buffer_size
        self.weights = np.zeros((F, NH))
        self._phi = np.zeros((N, F))
        self._h = np.zeros((N, NH))
        self._prev = np.zeros((N, NH))
        self._count = 0
        self._head = 0
        self.updates = 0
        self.last_prediction = np.zeros(NH)
        self.last_loss = 0.0
        self.last_time = -np.inf

    def __len__(self):
        return self._count

    def _order(self):
        N = self.config.buffer_size
        if self._count < N:
            return np.arange(self._count)
        return (self._head + np.arange(N)) % N

    @property
    def buffer(self):
        """``(Phi, H, P)`` of the buffered samples, oldest first."""
        idx = self._order()
        return self._phi[idx], self._h[idx], self._prev[idx]

    def predict(self, Z) -> np.ndarray:
        return self.feature_map.evaluate(Z) @ self.weights

    def forecast(self, Z_seq) -> np.ndarray:
        """Residual forecasts for a sequence of predicted inputs (weights frozen)."""
        return self.predict(np.atleast_2d(Z_seq))

    def loss(self, weights=None) -> float:
        Phi, H, P = self.buffer
        A = self.weights if weights is None else weights
        return buffered_loss(A, Phi, H, P, self.config.regularizer)

    def gradient(self, weights=None) -> np.ndarray:
        Phi, H, P = self.buffer
        A = self.weights if weights is None else weights
        return buffered_loss_gradient(A, Phi, H, P, self.config.regularizer)

    def insert(self, Z, residual):
        Z = np.asarray(Z, dtype=float)
        if not np.all(np.isfinite(Z)) or not np.all(np.isfinite(residual)):
            raise ValueError("learner sample must be finite")
        if Z[-1] <= self.last_time:
            raise ValueError("sample times must be strictly increasing")
        phi = self.feature_map.evaluate(Z)
        N = self.config.buffer_size
        slot = self._head
        self._phi[slot] = phi
        self._h[slot] = residual
        self._prev[slot] = self.last_prediction
        self._head = (slot + 1) % N
        self._count = min(self._count + 1, N)
        self.last_prediction = phi @ self.weights
        self.last_time = float(Z[-1])

    def update(self, Z, residual) -> float:
        """Insert the newest sample and take one gradient step; returns the
        buffered loss before the step."""
        self.insert(Z, residual)
        Phi, H, P = self.buffer
        lam = self.config.regularizer
        self.last_loss = buffered_loss(self.weights, Phi, H, P, lam)
        self.weights = self.weights - self.config.step_size * buffered_loss_gradient(
            self.weights, Phi, H, P, lam)
        self.updates += 1
        return self.last_loss

    def snapshot(self) -> dict:
        return {"weights": self.weights.copy(), "buffer_length": self._count,
                "loss": self.last_loss, "updates": self.updates}
