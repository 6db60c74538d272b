"""Reference trajectory generators."""

from __future__ import annotations

import numpy as np

from .. import liegroup as lg
from ..mpc import ReferenceTrajectory

SURGE_SPEED = 0.5
TURN_RATE = 0.3


def integrate_twists(twists, dt, start=None) -> np.ndarray:
    """Poses ``X_k+1 = X_k exp(xi_k dt)``, the same exponential step the plant uses."""
    twists = np.asarray(twists, dtype=float)
    steps = lg.exp_se3(twists[:-1] * dt)
    poses = np.empty((len(twists), 4, 4))
    poses[0] = np.eye(4) if start is None else start
    for k in range(len(twists) - 1):
        X = poses[k] @ steps[k]
        X[:3, :3] = lg.orthonormalize(X[:3, :3])
        poses[k + 1] = X
    return poses


def zigzag_twists(times, surge=SURGE_SPEED, amplitude=0.1, period_scale=100.0):
    tw = np.zeros((len(times), 6))
    tw[:, 2] = amplitude * np.cos(times / period_scale)
    tw[:, 3] = surge
    return tw


def _rate_schedule(segments, times, dt):
    """Per-sample yaw rate for a list of ``(duration, rate)`` segments.

    A sample that straddles a boundary gets the time-weighted average rate, so
    the integrated heading of each segment is exact.
    """
    edges = np.concatenate([[0.0], np.cumsum([d for d, _ in segments])])
    rates = np.array([r for _, r in segments] + [0.0])
    out = np.zeros(len(times))
    for k, t in enumerate(times):
        lo, hi = t, t + dt
        acc = 0.0
        for i in range(len(segments)):
            a, b = max(lo, edges[i]), min(hi, edges[i + 1])
            if b > a:
                acc += (b - a) * rates[i]
        out[k] = acc / dt
    return out


def lawnmower_segments(duration, legs=4, transit=2.0, surge=SURGE_SPEED,
                       turn_rate=TURN_RATE):
    """Straight legs joined by two 90 degree turns and a short transit each.

    Turns alternate direction between crossings.  The leg length is chosen so
    the pattern exactly fills ``duration``.
    """
    turn = 0.5 * np.pi / turn_rate
    crossings = legs - 1
    fixed = crossings * (2.0 * turn + transit / surge)
    leg_time = (duration - fixed) / legs
    if leg_time <= 0:
        raise ValueError("duration too short for the requested lawnmower pattern")
    segments = []
    for i in range(legs):
        segments.append((leg_time, 0.0))
        if i < crossings:
            sign = 1.0 if i % 2 == 0 else -1.0
            segments += [(turn, sign * turn_rate), (transit / surge, 0.0),
                         (turn, sign * turn_rate)]
    return segments


def make_reference(kind: str = "zigzag", duration: float = 128.0, dt: float = 0.02,
                   tail: float = 0.0, **options) -> ReferenceTrajectory:
    """Sampled reference of ``round((duration + tail) / dt) + 1`` poses starting
    at identity.

    ``kind`` is ``zigzag``, ``lawnmower`` or ``file`` (``path=`` a CSV of
    ``t, wx, wy, wz, vx, vy, vz`` rows at the control period).  The pattern is
    laid out over ``duration``; ``tail`` seconds continue its final motion so a
    prediction horizon never runs past the end during the run.  File
    references are used as given.
    """
    if duration <= 0 or dt <= 0 or tail < 0:
        raise ValueError("duration and dt must be positive, tail non-negative")
    n = int(round((duration + tail) / dt)) + 1
    times = np.arange(n) * dt
    surge = options.get("surge", SURGE_SPEED)
    if kind == "zigzag":
        tw = zigzag_twists(times, surge, options.get("amplitude", 0.1),
                           options.get("period_scale", 100.0))
    elif kind == "lawnmower":
        segments = lawnmower_segments(duration, options.get("legs", 4),
                                      options.get("transit", 2.0), surge,
                                      options.get("turn_rate", TURN_RATE))
        tw = np.zeros((n, 6))
        tw[:, 2] = _rate_schedule(segments, times, dt)
        tw[:, 3] = surge
    elif kind in ("file", "custom-file"):
        data = np.loadtxt(options["path"], delimiter=",", ndmin=2)
        tw = data[:, 1:7]
        n = len(tw)
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return ReferenceTrajectory(integrate_twists(tw, dt), tw, dt)
