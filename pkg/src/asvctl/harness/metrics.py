"""Tracking metrics and the seeded random protocol."""

from __future__ import annotations

import numpy as np


def trial_rng(seed: int, trial: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, trial)``; identical on every platform.

    ``stream`` selects a non-overlapping substream (the initial offset uses 0,
    measurement noise 1).
    """
    key = np.array([int(seed) % 2 ** 64, int(trial) % 2 ** 64], dtype=np.uint64)
    bg = np.random.Philox(key=key)
    if stream:
        bg = bg.jumped(stream)
    return np.random.Generator(bg)


def initial_offset(u: float, theta: float, radius: float = 1.0) -> np.ndarray:
    """``[r sqrt(u) cos(theta), r sqrt(u) sin(theta), 0]``."""
    s = radius * np.sqrt(u)
    return np.array([s * np.cos(theta), s * np.sin(theta), 0.0])


def sample_initial_offset(rng: np.random.Generator, radius: float = 1.0, size=None):
    """Planar offset uniform over the disk of ``radius`` (area density, via sqrt(u))."""
    theta = rng.uniform(0.0, 2.0 * np.pi, size)
    u = rng.uniform(0.0, 1.0, size)
    if size is None:
        return initial_offset(u, theta, radius)
    s = radius * np.sqrt(u)
    return np.stack([s * np.cos(theta), s * np.sin(theta), np.zeros_like(s)], axis=-1)


def planar_errors(actual_xy, reference_xy) -> np.ndarray:
    """Per-sample planar position error norm."""
    d = np.asarray(actual_xy, dtype=float) - np.asarray(reference_xy, dtype=float)
    return np.hypot(d[..., 0], d[..., 1])


def steady_window(n: int) -> slice:
    """Second half of a run of ``n`` samples."""
    return slice(n // 2, n)


def compute_rmse(errors, segment: str = "second_half") -> dict:
    """Both RMSE definitions over ``segment`` (``second_half`` or ``all``).

    ``standard`` is ``sqrt(mean(e^2))``; ``literal`` is ``sqrt(mean(e))``, the
    unsquared variant (no square inside the sum), kept for comparison.
    """
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("error log is empty")
    if segment == "second_half":
        e = e[steady_window(len(e))]
    elif segment != "all":
        raise ValueError("segment must be 'second_half' or 'all'")
    return {"standard": float(np.sqrt(np.mean(e ** 2))),
            "literal": float(np.sqrt(np.mean(e)))}


def summarize(errors, saturated=None) -> dict:
    e = np.asarray(errors, dtype=float)
    rm = compute_rmse(e)
    w = e[steady_window(len(e))]
    out = {"rmse": rm["standard"], "rmse_literal": rm["literal"],
           "mean_error": float(np.mean(w)), "max_error": float(np.max(w))}
    if saturated is not None:
        out["saturation_fraction"] = float(np.mean(np.asarray(saturated, dtype=bool)))
    return out
