"""IMU dead-reckoning and the closed-form drift envelope.

The preintegrator advances a planar pose from speed and compass-heading
deltas and keeps the bookkeeping (distance, elapsed time, high-passed
accelerometer statistics) that feeds the cross-/along-track error model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose2, wrap_angle

DIVERGENCE_FLOOR = 0.03


@dataclass(frozen=True)
class ImuSample:
    """One inertial step; ``heading_abs`` is the compass-aided yaw at the end of the step."""

    yaw_rate: float
    accel_fwd: float
    speed: float
    heading_abs: float
    dt: float
    t: float = 0.0

    def __post_init__(self) -> None:
        for name in ("yaw_rate", "accel_fwd", "speed", "heading_abs", "dt", "t"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"ImuSample.{name} must be finite")
        if self.dt <= 0.0:
            raise ValueError("ImuSample.dt must be positive")


@dataclass(frozen=True)
class ImuCalibration:
    sigma_omega: float = 0.002  # rad/sqrt(s)
    accel_hp_cutoff: float = 0.5  # Hz

    def __post_init__(self) -> None:
        if not self.sigma_omega > 0.0:
            raise ValueError("sigma_omega must be positive")
        if not self.accel_hp_cutoff > 0.0:
            raise ValueError("accel_hp_cutoff must be positive")


@dataclass(frozen=True)
class ErrorEnvelope:
    eps_cross: float
    eps_along: float
    eps_imu: float
    d_div: float


class Preintegrator:
    """Single-owner accumulator of dead-reckoned motion since the last anchor.

    Args:
        origin: Starting pose. Its heading seeds the heading-delta tracking.
        calibration: Supplies the accelerometer high-pass cutoff.
        velocity_source: ``"speed"`` uses the speed channel; ``"accel"``
            integrates the forward accelerometer instead (platforms with no
            speed estimate).
        velocity: Initial velocity for the accel fallback.
    """

    def __init__(
        self,
        origin: Pose2,
        calibration: ImuCalibration | None = None,
        velocity_source: str = "speed",
        velocity: float = 0.0,
    ) -> None:
        if velocity_source not in ("speed", "accel"):
            raise ValueError(f"unknown velocity_source {velocity_source!r}")
        self.calibration = calibration or ImuCalibration()
        self.velocity_source = velocity_source
        self._x = origin.x
        self._y = origin.y
        self._theta = origin.theta
        self._last_heading = origin.theta
        self.velocity = float(velocity)
        self.distance = 0.0
        self.elapsed = 0.0
        # high-pass filter state persists across anchors
        self._hp_prev_in: float | None = None
        self._hp_prev_out = 0.0
        # running statistics of the filtered residual since the anchor
        self._n = 0
        self._mean = 0.0
        self._m2 = 0.0

    @property
    def position(self) -> Pose2:
        return Pose2(self._x, self._y, self._theta)

    @property
    def accel_residual_count(self) -> int:
        return self._n

    @property
    def accel_residual_std(self) -> float:
        """Unbiased standard deviation of the filtered residual window (0 if n < 2)."""
        if self._n < 2:
            return 0.0
        return math.sqrt(max(self._m2, 0.0) / (self._n - 1))

    def integrate(self, s: ImuSample) -> Preintegrator:
        """Advance by one sample (in place) and return self."""
        self.step(s.speed, s.heading_abs, s.dt, s.accel_fwd)
        return self

    def step(self, speed: float, heading_abs: float, dt: float, accel_fwd: float = 0.0) -> None:
        """Float-level version of :meth:`integrate` for hot loops."""
        if not (math.isfinite(speed) and math.isfinite(heading_abs) and math.isfinite(accel_fwd)):
            raise ValueError("non-finite IMU sample")
        if not (dt > 0.0 and math.isfinite(dt)):
            raise ValueError("dt must be positive and finite")

        if self.velocity_source == "speed":
            v = speed
            self.velocity = speed
        else:
            v = self.velocity
            self.velocity += accel_fwd * dt

        # rectangular rule: move along the heading held at the start of the step
        d = v * dt
        self._x += math.cos(self._theta) * d
        self._y += math.sin(self._theta) * d
        dh = heading_abs - self._last_heading
        if dh > math.pi or dh <= -math.pi:
            dh = wrap_angle(dh)
        self._theta += dh
        if self._theta > math.pi or self._theta <= -math.pi:
            self._theta = wrap_angle(self._theta)
        self._last_heading = heading_abs

        self.distance += abs(d)
        self.elapsed += dt

        rc = 1.0 / (2.0 * math.pi * self.calibration.accel_hp_cutoff)
        a = rc / (rc + dt)
        prev_in = accel_fwd if self._hp_prev_in is None else self._hp_prev_in
        out = a * (self._hp_prev_out + accel_fwd - prev_in)
        self._hp_prev_in = accel_fwd
        self._hp_prev_out = out

        self._n += 1
        delta = out - self._mean
        self._mean += delta / self._n
        self._m2 += delta * (out - self._mean)

    def reset_position_anchor(self, xy: tuple[float, float]) -> Preintegrator:
        """Move the position channel to ``xy`` and restart the error model.

        Heading and velocity are untouched.
        """
        x, y = float(xy[0]), float(xy[1])
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValueError("anchor position must be finite")
        self._x, self._y = x, y
        self.distance = 0.0
        self.elapsed = 0.0
        self._n = 0
        self._mean = 0.0
        self._m2 = 0.0
        return self


def integrate(pre: Preintegrator, s: ImuSample) -> Preintegrator:
    return pre.integrate(s)


def reset_position_anchor(pre: Preintegrator, xy: tuple[float, float]) -> Preintegrator:
    return pre.reset_position_anchor(xy)


def cross_track_error(cal: ImuCalibration, distance: float, elapsed: float) -> float:
    """Gyro-driven cross-track bound, inflated to 3 sigma."""
    if distance < 0.0 or elapsed < 0.0:
        raise ValueError("distance and elapsed must be non-negative")
    return 3.0 * distance * cal.sigma_omega * math.sqrt(elapsed)


def along_track_error(pre: Preintegrator) -> float:
    return 0.5 * pre.accel_residual_std * pre.elapsed**2


def combine_envelope(eps_cross: float, eps_along: float, d_div: float) -> ErrorEnvelope:
    """Composite trigger scalar: the larger drift term, floored at 3% of the divergence chord."""
    if min(eps_cross, eps_along, d_div) < 0.0:
        raise ValueError("envelope terms must be non-negative")
    return ErrorEnvelope(eps_cross, eps_along, max(eps_cross, eps_along, DIVERGENCE_FLOOR * d_div), d_div)


def composite_error(pre: Preintegrator, cal: ImuCalibration, ukf_position: Pose2) -> ErrorEnvelope:
    eps_cross = cross_track_error(cal, pre.distance, pre.elapsed)
    eps_along = along_track_error(pre)
    d_div = math.hypot(ukf_position.x - pre._x, ukf_position.y - pre._y)
    return combine_envelope(eps_cross, eps_along, d_div)


def dead_reckon(
    speed: np.ndarray, heading_abs: np.ndarray, dt: np.ndarray, origin: Pose2
) -> np.ndarray:
    """Vectorised never-reset dead reckoning with the preintegrator's rectangular rule.

    Returns an ``(n + 1, 3)`` array of poses, row 0 being ``origin``.
    """
    speed = np.asarray(speed, dtype=float)
    heading_abs = np.asarray(heading_abs, dtype=float)
    dt = np.broadcast_to(np.asarray(dt, dtype=float), speed.shape)
    dh = np.diff(np.concatenate([[origin.theta], heading_abs]))
    dh = np.mod(dh + np.pi, 2.0 * np.pi) - np.pi
    theta = origin.theta + np.concatenate([[0.0], np.cumsum(dh)])
    d = speed * dt
    x = origin.x + np.concatenate([[0.0], np.cumsum(np.cos(theta[:-1]) * d)])
    y = origin.y + np.concatenate([[0.0], np.cumsum(np.sin(theta[:-1]) * d)])
    theta = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    return np.column_stack([x, y, theta])
