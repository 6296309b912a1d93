"""When to call the matcher, where to look, and whether to trust the answer."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .cvgl import CropQuery, CvglFix, MeasurementSource
from .geometry import Pose2

# Priority among equal weights: centre, forward, back, left, right.
# Indices refer to the fixed offset order returned by five_point_offsets.
TIE_PRIORITY = (1, 2, 0, 4, 3)


@dataclass(frozen=True)
class TriggerConfig:
    error_threshold: float = 1.0
    time_threshold: float = 2.0
    fwd_bias_coeff: float = 0.4
    fwd_bias_cap: float = 15.0
    cross_coeff: float = 0.5
    cross_cap: float = 10.0
    yaw_gate: float = 0.35

    def __post_init__(self) -> None:
        for name, value in vars(self).items():
            if not (value > 0.0 and math.isfinite(value)):
                raise ValueError(f"trigger.{name} must be positive, got {value!r}")


@dataclass
class TriggerState:
    time_since_fix: float = 0.0

    def advance(self, dt: float) -> None:
        self.time_since_fix += dt

    def reset(self) -> None:
        self.time_since_fix = 0.0


def should_trigger(cfg: TriggerConfig, eps_imu: float, st: TriggerState) -> bool:
    return trigger_cause(cfg, eps_imu, st) is not None


def trigger_cause(cfg: TriggerConfig, eps_imu: float, st: TriggerState) -> str | None:
    """``"error"`` or ``"time"`` if a search should launch, else ``None``."""
    if eps_imu >= cfg.error_threshold:
        return "error"
    if st.time_since_fix > cfg.time_threshold:
        return "time"
    return None


def forward_bias(cfg: TriggerConfig, eps_imu: float) -> float:
    if eps_imu < 0.0:
        raise ValueError("eps_imu must be non-negative")
    return min(cfg.fwd_bias_coeff * eps_imu, cfg.fwd_bias_cap)


def cross_spacing(cfg: TriggerConfig, eps_imu: float) -> float:
    if eps_imu < 0.0:
        raise ValueError("eps_imu must be non-negative")
    return min(cfg.cross_coeff * eps_imu, cfg.cross_cap)


def five_point_offsets(cfg: TriggerConfig, eps_imu: float) -> list[tuple[float, float]]:
    """Body-frame (fwd, lat) offsets in the order back, centre, forward, right, left."""
    d = cross_spacing(cfg, eps_imu)
    return [(-d, 0.0), (0.0, 0.0), (d, 0.0), (0.0, -d), (0.0, d)]


def multicrop_search(
    cfg: TriggerConfig,
    source: MeasurementSource,
    ukf_pose: Pose2,
    eps_imu: float,
    frame_index: int,
    truth: Pose2 | None = None,
    *,
    heading: float | None = None,
    use_forward_bias: bool = True,
    single_crop: bool = False,
) -> tuple[CvglFix, CropQuery] | None:
    """Query the crops around the forward-biased centre and keep the heaviest fix.

    Args:
        heading: Query heading (the compass heading at trigger time). Defaults
            to ``ukf_pose.theta``.
        use_forward_bias: Ablation switch for the forward shift.
        single_crop: Ablation switch that evaluates the centre crop only.

    Returns:
        ``(fix, query)`` for the winning crop, or ``None`` when every crop missed.
    """
    psi = ukf_pose.theta if heading is None else heading
    c, s = math.cos(ukf_pose.theta), math.sin(ukf_pose.theta)
    shift = forward_bias(cfg, eps_imu) if use_forward_bias else 0.0
    cx = ukf_pose.x + c * shift
    cy = ukf_pose.y + s * shift

    offsets = [(0.0, 0.0)] if single_crop else five_point_offsets(cfg, eps_imu)
    priority = (0,) if single_crop else TIE_PRIORITY
    results: list[tuple[CvglFix, CropQuery] | None] = []
    for fwd, lat in offsets:
        q = CropQuery((cx + c * fwd - s * lat, cy + s * fwd + c * lat), psi, frame_index)
        fix = source.query(q, truth)
        results.append(None if fix is None else (fix, q))

    best = None
    for idx in priority:
        r = results[idx]
        if r is not None and (best is None or r[0].weight > best[0].weight):
            best = r
    return best


def yaw_gate(cfg: TriggerConfig, fix: CvglFix) -> bool:
    """True if the fix's rotation residual is within the gate."""
    return abs(fix.yaw_residual) <= cfg.yaw_gate
