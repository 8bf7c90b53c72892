"""SE(2) poses and keypoint transforms for the planar push task."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    w = math.remainder(float(theta), _TWO_PI)
    if w <= -math.pi:
        w += _TWO_PI
    return w


@dataclass(frozen=True)
class Pose2:
    """Planar rigid transform: rotate by ``theta``, then translate by ``(x, y)``.

    ``theta`` is normalized to (-pi, pi] on construction, so composing and
    inverting poses never accumulates full turns.
    """

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @staticmethod
    def identity() -> "Pose2":
        return Pose2()

    @staticmethod
    def from_array(arr) -> "Pose2":
        x, y, theta = (float(v) for v in arr)
        return Pose2(x, y, theta)

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        """2x2 rotation matrix."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous transform matrix."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def compose(self, other: "Pose2") -> "Pose2":
        """Rigid transform equal to applying ``other`` first, then ``self``."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)

    def transform(self, points) -> np.ndarray:
        """Apply the transform to a point ``(2,)`` or any stack ``(..., 2)``."""
        pts = np.asarray(points, dtype=float)
        c, s = math.cos(self.theta), math.sin(self.theta)
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([c * x - s * y + self.x, s * x + c * y + self.y], axis=-1)

    def rotate_only(self, vectors) -> np.ndarray:
        """Rotate direction vectors, ignoring the translation part."""
        v = np.asarray(vectors, dtype=float)
        c, s = math.cos(self.theta), math.sin(self.theta)
        x, y = v[..., 0], v[..., 1]
        return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def compose(a: Pose2, b: Pose2) -> Pose2:
    return a.compose(b)


def inverse(p: Pose2) -> Pose2:
    return p.inverse()


def as_keypoints(points, n: int | None = None) -> np.ndarray:
    """Validate and coerce a keypoint set to a float ``(n, 2)`` array."""
    kp = np.asarray(points, dtype=float)
    if kp.ndim != 2 or kp.shape[1] != 2 or kp.shape[0] < 1:
        raise ValueError(f"keypoints must have shape (n, 2), got {kp.shape}")
    if n is not None and kp.shape[0] != n:
        raise ValueError(f"expected {n} keypoints, got {kp.shape[0]}")
    if not np.all(np.isfinite(kp)):
        raise ValueError("keypoints must be finite")
    return kp


def transform_keypoints(pose: Pose2, template) -> np.ndarray:
    """Rigid image of a keypoint template under ``pose``; order preserved."""
    return pose.transform(as_keypoints(template))


def pose_from_keypoints(template, keypoints) -> Pose2:
    """Least-squares rigid fit mapping ``template`` onto ``keypoints``.

    Closed-form planar Procrustes; exact (to rounding) whenever the keypoints
    are a rigid image of the template, which is the only way this package
    produces them. Requires a template that is not rotationally symmetric.
    """
    t = as_keypoints(template)
    k = as_keypoints(keypoints, n=t.shape[0])
    tc = t - t.mean(axis=0)
    kc = k - k.mean(axis=0)
    num = float(np.sum(tc[:, 0] * kc[:, 1] - tc[:, 1] * kc[:, 0]))
    den = float(np.sum(tc[:, 0] * kc[:, 0] + tc[:, 1] * kc[:, 1]))
    theta = math.atan2(num, den)
    c, s = math.cos(theta), math.sin(theta)
    tm = t.mean(axis=0)
    km = k.mean(axis=0)
    return Pose2(
        km[0] - (c * tm[0] - s * tm[1]),
        km[1] - (s * tm[0] + c * tm[1]),
        theta,
    )
