"""Recovery keypoint trajectories with a distance-based delay heuristic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PlanConfig:
    alpha: float = 4.0     # per-frame step scale along the recovery direction
    horizon: int = 16      # number of planned frames
    d_min: float = 20.0    # distance below which the plan stays fully delayed
    d_max: float = 160.0   # distance above which the plan starts immediately

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not (0.0 <= self.d_min < self.d_max):
            raise ValueError("need 0 <= d_min < d_max")


def delay(d_pos: float, cfg: PlanConfig) -> int:
    """Delay frames before the planned object starts moving.

    Linear through ``(d_min, horizon)`` and ``(d_max, 0)``, rounded half to
    even and clamped to ``[0, horizon]``.
    """
    if d_pos < 0:
        raise ValueError("d_pos must be non-negative")
    f = cfg.horizon * (cfg.d_max - d_pos) / (cfg.d_max - cfg.d_min)
    return int(min(max(0, round(f)), cfg.horizon))


def plan_recovery(keypoints, delta, d_pos: float, cfg: PlanConfig) -> np.ndarray:
    """Keypoint trajectory of shape (horizon, n, 2).

    Frame ``t`` (1-based) translates every keypoint rigidly by
    ``max(0, t - delay) * alpha * delta``; with zero delay this reduces to the
    naive constant-step trajectory.
    """
    kps = np.asarray(keypoints, dtype=float)
    dv = np.asarray(delta, dtype=float)
    df = delay(d_pos, cfg)
    t = np.arange(1, cfg.horizon + 1)
    steps = np.maximum(0, t - df).astype(float)
    return kps[None, :, :] + steps[:, None, None] * cfg.alpha * dv[None, None, :]


def naive_plan(keypoints, delta, cfg: PlanConfig) -> np.ndarray:
    """The zero-delay trajectory: frame ``t`` shifted by ``t * alpha * delta``."""
    return plan_recovery(keypoints, delta, cfg.d_max + 1.0, cfg)
