"""Planar pose algebra and angle conventions.

Frames are local ENU: x east, y north, heading measured counter-clockwise
from east. Body increments use +forward along the heading and +lateral to
the vehicle's left, so at heading 0 a lateral step moves +y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    if not math.isfinite(a):
        raise ValueError(f"angle must be finite, got {a!r}")
    w = math.fmod(a + math.pi, TWO_PI)
    if w < 0.0:
        w += TWO_PI
    # fmod leaves w in [0, 2pi); map the closed end so pi stays pi
    w -= math.pi
    if w == -math.pi:
        return math.pi
    return w


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle` for numpy arrays."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, TWO_PI) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite value {v!r}")


@dataclass(frozen=True)
class Pose2:
    """Planar pose; theta is wrapped on construction."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        _check_finite(self.x, self.y, self.theta)
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, a) -> Pose2:
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def inverse(self) -> Pose2:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def __matmul__(self, other: Pose2) -> Pose2:
        """SE(2) product ``self * other``."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )


@dataclass(frozen=True)
class BodyIncrement:
    """Relative motion expressed in the body frame of the starting pose."""

    d_fwd: float
    d_lat: float
    d_theta: float

    def __post_init__(self) -> None:
        _check_finite(self.d_fwd, self.d_lat, self.d_theta)
        object.__setattr__(self, "d_fwd", float(self.d_fwd))
        object.__setattr__(self, "d_lat", float(self.d_lat))
        object.__setattr__(self, "d_theta", wrap_angle(float(self.d_theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.d_fwd, self.d_lat, self.d_theta])

    def as_pose(self) -> Pose2:
        return Pose2(self.d_fwd, self.d_lat, self.d_theta)

    @property
    def norm(self) -> float:
        return math.hypot(self.d_fwd, self.d_lat)


@dataclass(frozen=True)
class Rot2:
    """2x2 rotation matrix stored row-major."""

    r00: float
    r01: float
    r10: float
    r11: float

    def __post_init__(self) -> None:
        m = self.matrix()
        if not np.all(np.isfinite(m)):
            raise ValueError("rotation entries must be finite")
        if np.max(np.abs(m.T @ m - np.eye(2))) > 1e-9 or abs(np.linalg.det(m) - 1.0) > 1e-9:
            raise ValueError("matrix is not a proper rotation")

    @classmethod
    def from_angle(cls, a: float) -> Rot2:
        c, s = math.cos(a), math.sin(a)
        return cls(c, -s, s, c)

    @classmethod
    def identity(cls) -> Rot2:
        return cls(1.0, 0.0, 0.0, 1.0)

    def matrix(self) -> np.ndarray:
        return np.array([[self.r00, self.r01], [self.r10, self.r11]], dtype=float)

    def as_list(self) -> list[float]:
        return [self.r00, self.r01, self.r10, self.r11]


def rot2_from_angle(a: float) -> Rot2:
    return Rot2.from_angle(a)


def compose(p: Pose2, inc: BodyIncrement) -> Pose2:
    """Apply a body-frame increment to a pose (rigid-motion model)."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(
        p.x + c * inc.d_fwd - s * inc.d_lat,
        p.y + s * inc.d_fwd + c * inc.d_lat,
        p.theta + inc.d_theta,
    )


def between(a: Pose2, b: Pose2) -> BodyIncrement:
    """Increment taking ``a`` to ``b``; inverse of :func:`compose`."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    return BodyIncrement(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


def enu_yaw_to_image_heading(psi_enu: float) -> float:
    """Convert east-CCW yaw to the north-clockwise heading used for tile rotation."""
    return wrap_angle(math.pi / 2.0 - psi_enu)


def yaw_residual(r: Rot2) -> float:
    return wrap_angle(math.atan2(r.r10, r.r00))


def rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])
