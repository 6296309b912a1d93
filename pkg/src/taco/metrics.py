"""Trajectory error metrics with rigid first-pose alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


def _as_poses(series) -> np.ndarray:
    a = np.asarray(series, dtype=float)
    if a.ndim != 2 or a.shape[1] < 2:
        raise ValueError("expected an (n, 3) pose array")
    return a


def align_first_pose(est: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Rigidly move ``est`` so its pose 0 coincides with ``truth``'s pose 0."""
    est = _as_poses(est)
    truth = _as_poses(truth)
    dth = truth[0, 2] - est[0, 2]
    c, s = math.cos(dth), math.sin(dth)
    rel = est[:, :2] - est[0, :2]
    out = est.copy()
    out[:, 0] = truth[0, 0] + c * rel[:, 0] - s * rel[:, 1]
    out[:, 1] = truth[0, 1] + s * rel[:, 0] + c * rel[:, 1]
    out[:, 2] = est[:, 2] + dth
    return out


def position_errors(est, truth) -> np.ndarray:
    est = _as_poses(est)
    truth = _as_poses(truth)
    if est.shape[0] != truth.shape[0]:
        raise ValueError(f"length mismatch: {est.shape[0]} estimated vs {truth.shape[0]} true poses")
    if est.shape[0] == 0:
        raise ValueError("empty trajectory")
    a = align_first_pose(est, truth)
    return np.hypot(a[:, 0] - truth[:, 0], a[:, 1] - truth[:, 1])


def ate_rmse(est, truth) -> float:
    e = position_errors(est, truth)
    return float(np.sqrt(np.mean(e**2)))


def steady_state_rmse(est, truth, accepted_frames: Sequence[int]) -> float | None:
    """RMSE over frames strictly after the third accepted fix; ``None`` with fewer than three."""
    frames = sorted(accepted_frames)
    if len(frames) < 3:
        return None
    e = position_errors(est, truth)[frames[2] + 1:]
    if e.size == 0:
        return None
    return float(np.sqrt(np.mean(e**2)))


def path_length_km(truth) -> float:
    xy = _as_poses(truth)[:, :2]
    return float(np.sum(np.hypot(*np.diff(xy, axis=0).T))) / 1000.0


def drift_rate(est, truth, length_km: float) -> float:
    if not length_km > 0.0:
        raise ValueError("trajectory length must be positive")
    return ate_rmse(est, truth) / length_km


def fixes_per_km(accepted_count: int, length_km: float) -> float:
    if not length_km > 0.0:
        raise ValueError("trajectory length must be positive")
    if accepted_count < 0:
        raise ValueError("accepted_count must be non-negative")
    return accepted_count / length_km


@dataclass(frozen=True)
class TrajectoryMetrics:
    ate_rmse: float
    drift_rate: float
    steady_state_rmse: float | None
    fixes_per_km: float
    trajectory_length: float

    def as_row(self) -> dict[str, float | None]:
        return {
            "ate_rmse": self.ate_rmse,
            "drift_rate": self.drift_rate,
            "steady_state_rmse": self.steady_state_rmse,
            "fixes_per_km": self.fixes_per_km,
            "trajectory_length": self.trajectory_length,
        }


def compute_metrics(est, truth, accepted_frames: Sequence[int] = ()) -> TrajectoryMetrics:
    length = path_length_km(truth)
    ate = ate_rmse(est, truth)
    return TrajectoryMetrics(
        ate_rmse=ate,
        drift_rate=ate / length if length > 0.0 else math.nan,
        steady_state_rmse=steady_state_rmse(est, truth, accepted_frames),
        fixes_per_km=fixes_per_km(len(accepted_frames), length) if length > 0.0 else math.nan,
        trajectory_length=length,
    )


def associate(t_est: np.ndarray, t_ref: np.ndarray, max_gap: float) -> np.ndarray:
    """Index into ``t_est`` of the nearest sample for every reference timestamp.

    Raises if any reference timestamp has no estimate within ``max_gap``.
    """
    t_est = np.asarray(t_est, dtype=float)
    t_ref = np.asarray(t_ref, dtype=float)
    if t_est.size == 0:
        raise ValueError("no estimated samples to associate")
    if np.any(np.diff(t_est) < 0.0):
        raise ValueError("estimate timestamps must be sorted")
    hi = np.clip(np.searchsorted(t_est, t_ref), 1, max(t_est.size - 1, 1))
    lo = hi - 1
    if t_est.size == 1:
        idx = np.zeros(t_ref.size, dtype=int)
    else:
        idx = np.where(np.abs(t_est[lo] - t_ref) <= np.abs(t_est[hi] - t_ref), lo, hi)
    gap = np.abs(t_est[idx] - t_ref)
    if np.any(gap > max_gap):
        k = int(np.argmax(gap))
        raise ValueError(f"no estimate within {max_gap:g} s of t={t_ref[k]:.6f} (nearest is {gap[k]:.6f} s away)")
    return idx
