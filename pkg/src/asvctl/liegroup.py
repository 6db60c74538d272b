"""SO(3)/SE(3) group and algebra operations.

Conventions used throughout the package:

* A pose is a 4x4 homogeneous matrix ``[[R, p], [0, 1]]``.
* A twist is a 6-vector ordered ``[omega; v]`` (angular first).

Every function accepts either a single element or a stack of elements with
arbitrary leading batch axes, e.g. ``exp_se3`` maps ``(..., 6) -> (..., 4, 4)``.
"""

from __future__ import annotations

import math

import numpy as np

# Below this rotation angle the closed forms switch to Taylor series.
SMALL_ANGLE = 1e-6
# Coefficients suffering cancellation of the form (x - sin x) use a longer
# series on a wider band.
_SERIES_BAND = 1e-2
# log_se3 refuses rotation angles closer than this to pi.
NEAR_PI_MARGIN = 1e-6
# Above pi - this, the rotation axis is taken from the symmetric part of R.
_AXIS_BRANCH = 1e-2


class AngleNearPi(ValueError):
    """Rotation angle too close to pi for a well-conditioned logarithm."""


def hat3(w):
    """Skew-symmetric matrix with ``hat3(w) @ u == cross(w, u)``."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee3(W):
    W = np.asarray(W, dtype=float)
    return np.stack([W[..., 2, 1], W[..., 0, 2], W[..., 1, 0]], axis=-1)


def hat6(xi):
    """se(3) matrix ``[[hat3(omega), v], [0, 0]]`` of a twist."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = hat3(xi[..., :3])
    out[..., :3, 3] = xi[..., 3:]
    return out


def vee6(X):
    X = np.asarray(X, dtype=float)
    return np.concatenate([vee3(X[..., :3, :3]), X[..., :3, 3]], axis=-1)


def make_pose(R=None, p=None):
    R = np.eye(3) if R is None else np.asarray(R, dtype=float)
    p = np.zeros(3) if p is None else np.asarray(p, dtype=float)
    out = np.zeros(np.broadcast_shapes(R.shape[:-2], p.shape[:-1]) + (4, 4))
    out[..., :3, :3] = R
    out[..., :3, 3] = p
    out[..., 3, 3] = 1.0
    return out


def inverse(X):
    X = np.asarray(X, dtype=float)
    Rt = np.swapaxes(X[..., :3, :3], -1, -2)
    return make_pose(Rt, -np.einsum("...ij,...j->...i", Rt, X[..., :3, 3]))


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _so3_coefficients(theta):
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)."""
    theta = np.asarray(theta, dtype=float)
    t2 = theta * theta
    tiny = theta < SMALL_ANGLE
    band = theta < _SERIES_BAND
    safe = np.where(tiny, 1.0, theta)
    a = np.where(tiny, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    half = np.sin(0.5 * safe) / (0.5 * safe)
    b = np.where(tiny, 0.5 - t2 / 24.0, 0.5 * half * half)
    safe_band = np.where(band, 1.0, theta)
    c_closed = (safe_band - np.sin(safe_band)) / safe_band**3
    c_series = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0
    c = np.where(band, c_series, c_closed)
    return a, b, c


def exp_so3(w):
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _so3_coefficients(theta)
    W = hat3(w)
    W2 = W @ W
    return np.eye(3) + a[..., None, None] * W + b[..., None, None] * W2


def left_jacobian_so3(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    _, b, c = _so3_coefficients(theta)
    W = hat3(w)
    return np.eye(3) + b[..., None, None] * W + c[..., None, None] * (W @ W)


def _inv_left_jacobian_so3(w, theta):
    # V^-1 = I - W/2 + d W^2,  d = (1 - (t/2) cot(t/2)) / t^2
    t2 = theta * theta
    band = theta < _SERIES_BAND
    safe = np.where(band, 1.0, theta)
    d_closed = (1.0 - 0.5 * safe / np.tan(0.5 * safe)) / (safe * safe)
    d_series = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    d = np.where(band, d_series, d_closed)
    W = hat3(w)
    return np.eye(3) - 0.5 * W + d[..., None, None] * (W @ W)


def exp_se3(xi):
    """Closed-form exponential of a twist ``[omega; v]``."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    a, b, c = _so3_coefficients(theta)
    W = hat3(w)
    W2 = W @ W
    eye = np.eye(3)
    R = eye + a[..., None, None] * W + b[..., None, None] * W2
    V = eye + b[..., None, None] * W + c[..., None, None] * W2
    return make_pose(R, np.einsum("...ij,...j->...i", V, v))


def log_so3(R, strict=True):
    """Rotation vector of ``R``.

    With ``strict`` an :class:`AngleNearPi` is raised when the angle is within
    ``NEAR_PI_MARGIN`` of pi; otherwise the axis branch picks one of the two
    equivalent solutions.
    """
    R = np.asarray(R, dtype=float)
    if R.shape == (3, 3):
        w = _log_so3_single(R, strict)
        if w is not None:
            return w
    skew = vee3(R - np.swapaxes(R, -1, -2))  # 2 sin(t) n
    cos_t = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    sin_t = 0.5 * np.linalg.norm(skew, axis=-1)
    theta = np.arctan2(sin_t, np.clip(cos_t, -1.0, 1.0))
    if strict and np.any(theta > np.pi - NEAR_PI_MARGIN):
        raise AngleNearPi(
            f"rotation angle {np.max(theta):.12f} is within {NEAR_PI_MARGIN} of pi"
        )
    tiny = theta < SMALL_ANGLE
    safe_sin = np.where(tiny, 1.0, sin_t)
    scale = np.where(tiny, 0.5 + theta * theta / 12.0, 0.5 * theta / safe_sin)
    w = scale[..., None] * skew

    near_pi = theta > np.pi - _AXIS_BRANCH
    if np.any(near_pi):
        w = np.array(w, copy=True)
        flat_R = R.reshape(-1, 3, 3)
        flat_w = w.reshape(-1, 3)
        flat_t = theta.reshape(-1)
        flat_c = np.broadcast_to(cos_t, theta.shape).reshape(-1)
        flat_s = skew.reshape(-1, 3)
        for i in np.flatnonzero(near_pi.reshape(-1)):
            # n n^T = (sym(R) - cos t I) / (1 - cos t)
            nnT = (0.5 * (flat_R[i] + flat_R[i].T) - flat_c[i] * np.eye(3)) / (
                1.0 - flat_c[i]
            )
            k = int(np.argmax(np.diag(nnT)))
            n = nnT[:, k] / np.sqrt(max(nnT[k, k], 1e-300))
            if np.dot(n, flat_s[i]) < 0.0:
                n = -n
            flat_w[i] = flat_t[i] * n
    return w


def _log_so3_single(R, strict):
    # scalar version of the generic branch; returns None near pi
    sx = R[2, 1] - R[1, 2]
    sy = R[0, 2] - R[2, 0]
    sz = R[1, 0] - R[0, 1]
    cos_t = min(1.0, max(-1.0, 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)))
    sin_t = 0.5 * math.sqrt(sx * sx + sy * sy + sz * sz)
    theta = math.atan2(sin_t, cos_t)
    if theta > np.pi - _AXIS_BRANCH:
        if strict and theta > np.pi - NEAR_PI_MARGIN:
            raise AngleNearPi(f"rotation angle {theta:.12f} is within {NEAR_PI_MARGIN} of pi")
        return None
    if theta < SMALL_ANGLE:
        scale = 0.5 + theta * theta / 12.0
    else:
        scale = 0.5 * theta / sin_t
    return np.array([scale * sx, scale * sy, scale * sz])


def log_se3(X, strict=True):
    """Twist ``xi`` with ``exp_se3(xi) == X``; see :func:`log_so3` for ``strict``."""
    X = np.asarray(X, dtype=float)
    w = log_so3(X[..., :3, :3], strict=strict)
    if X.shape == (4, 4):
        return _log_se3_single(w, X[:3, 3])
    theta = np.linalg.norm(w, axis=-1)
    Vinv = _inv_left_jacobian_so3(w, theta)
    rho = np.einsum("...ij,...j->...i", Vinv, X[..., :3, 3])
    return np.concatenate([w, rho], axis=-1)


def _log_se3_single(w, p):
    wx, wy, wz = float(w[0]), float(w[1]), float(w[2])
    t2 = wx * wx + wy * wy + wz * wz
    theta = math.sqrt(t2)
    if theta < _SERIES_BAND:
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        d = (1.0 - 0.5 * theta / math.tan(0.5 * theta)) / t2
    px, py, pz = float(p[0]), float(p[1]), float(p[2])
    # V^-1 p = p - (w x p) / 2 + d (w x (w x p))
    cx, cy, cz = wy * pz - wz * py, wz * px - wx * pz, wx * py - wy * px
    ccx, ccy, ccz = wy * cz - wz * cy, wz * cx - wx * cz, wx * cy - wy * cx
    return np.array([wx, wy, wz, px - 0.5 * cx + d * ccx, py - 0.5 * cy + d * ccy,
                     pz - 0.5 * cz + d * ccz])


def adjoint_big(X):
    """``Ad_X = [[R, 0], [hat(p) R, R]]`` acting on ``[omega; v]``."""
    X = np.asarray(X, dtype=float)
    R = X[..., :3, :3]
    out = np.zeros(X.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = hat3(X[..., :3, 3]) @ R
    return out


def adjoint_small(xi):
    """``ad_xi = [[hat(w), 0], [hat(v), hat(w)]]``, so ``ad_xi @ eta = [xi, eta]``."""
    xi = np.asarray(xi, dtype=float)
    W = hat3(xi[..., :3])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = W
    out[..., 3:, 3:] = W
    out[..., 3:, :3] = hat3(xi[..., 3:])
    return out


def orthonormalize(R):
    """One Bjorck step, ``R (3I - R^T R) / 2``; exact to second order in the drift."""
    R = np.asarray(R, dtype=float)
    return 0.5 * R @ (3.0 * np.eye(3) - np.swapaxes(R, -1, -2) @ R)


def rotation_angle(R):
    R = np.asarray(R, dtype=float)
    cos_t = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    sin_t = 0.5 * np.linalg.norm(vee3(R - np.swapaxes(R, -1, -2)), axis=-1)
    return np.arctan2(sin_t, cos_t)


def heading(X):
    """Yaw angle of a pose (rotation about world z), in (-pi, pi]."""
    X = np.asarray(X, dtype=float)
    return np.arctan2(X[..., 1, 0], X[..., 0, 0])
