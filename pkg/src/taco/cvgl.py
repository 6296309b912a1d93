"""Cross-view matcher contract and the two measurement sources used in place of a network.

A matcher takes a crop query (centre, heading, frame) and returns ``(R, t, w)``:
the rotation residual against the query heading, a metric translation in
the rotated tile frame, and a match weight in (0, 1].

Tile frame: the crop is rotated so the query heading points image-up.
``t[0]`` is the offset along image-up (vehicle forward) and ``t[1]`` along
image-left (vehicle left), so the world offset is ``Rot(heading) @ t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .geometry import Pose2, Rot2, rot, wrap_angle, yaw_residual

MIN_WEIGHT = 1e-3


@dataclass(frozen=True)
class CropQuery:
    center: tuple[float, float]
    heading: float
    frame_index: int

    def __post_init__(self) -> None:
        cx, cy = float(self.center[0]), float(self.center[1])
        if not (math.isfinite(cx) and math.isfinite(cy)):
            raise ValueError("query centre must be finite")
        object.__setattr__(self, "center", (cx, cy))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))


@dataclass(frozen=True)
class CvglFix:
    rotation: Rot2
    translation: tuple[float, float]
    weight: float

    def __post_init__(self) -> None:
        if not (0.0 < self.weight <= 1.0):
            raise ValueError(f"fix weight must lie in (0, 1], got {self.weight}")
        tx, ty = float(self.translation[0]), float(self.translation[1])
        if not (math.isfinite(tx) and math.isfinite(ty)):
            raise ValueError("fix translation must be finite")
        object.__setattr__(self, "translation", (tx, ty))

    @property
    def yaw_residual(self) -> float:
        return yaw_residual(self.rotation)


class MeasurementSource(Protocol):
    def query(self, q: CropQuery, truth: Pose2 | None = None) -> CvglFix | None: ...


@dataclass(frozen=True)
class SimMatcherConfig:
    """Parameters of the simulated matcher.

    A fix that locks onto a symmetric structure is rotated by the flip angle
    about the matched feature centroid, which sits ``symmetry_lever`` metres
    ahead of the vehicle, so its position is dragged off by
    2 * lever * sin(flip / 2). ``sigma_heading_true`` is the
    matcher's own heading noise (rad). With ``weight_scaled_noise`` the
    position noise grows as 1/w, so crops centred far from the vehicle give
    both lower weight and worse fixes.
    """

    capture_radius: float = 20.0
    sigma_fwd_true: float = 1.0
    sigma_lat_true: float = 2.0
    sigma_heading_true: float = 0.03
    weight_decay: float = 0.05
    symmetry_fail_prob: float = 0.0
    symmetry_lever: float = 6.0
    weight_scaled_noise: bool = True
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.capture_radius > 0.0:
            raise ValueError("capture_radius must be positive")
        for name in ("sigma_fwd_true", "sigma_lat_true", "sigma_heading_true", "weight_decay", "symmetry_lever"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.symmetry_fail_prob <= 1.0:
            raise ValueError("symmetry_fail_prob must lie in [0, 1]")


def match_weight(offset: float, decay: float) -> float:
    return min(1.0, max(MIN_WEIGHT, math.exp(-decay * offset)))


class SimulatedMatcher:
    """Matcher stand-in driven by ground truth.

    Noise is keyed on ``(rng_seed, frame_index)``: every crop of the same
    camera frame sees the same matcher error, as a real network would for
    one ground image. Queries beyond the capture radius return ``None``.
    """

    def __init__(self, config: SimMatcherConfig | None = None) -> None:
        self.config = config or SimMatcherConfig()
        self.n_queries = 0

    def query(self, q: CropQuery, truth: Pose2 | None = None) -> CvglFix | None:
        if truth is None:
            raise ValueError("the simulated matcher needs the true pose")
        if q.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        self.n_queries += 1
        cfg = self.config
        ox, oy = truth.x - q.center[0], truth.y - q.center[1]
        offset = math.hypot(ox, oy)
        if offset > cfg.capture_radius:
            return None

        rng = np.random.default_rng([cfg.rng_seed, q.frame_index])
        n_fwd, n_lat, n_head = rng.standard_normal(3)
        u_fail, u_kind = rng.random(2)

        w = match_weight(offset, cfg.weight_decay)
        scale = 1.0 / w if cfg.weight_scaled_noise else 1.0
        body_noise = scale * np.array([n_fwd * cfg.sigma_fwd_true, n_lat * cfg.sigma_lat_true])
        pos = np.array(truth.xy) + rot(truth.theta) @ body_noise
        heading_est = truth.theta + n_head * cfg.sigma_heading_true

        if u_fail < cfg.symmetry_fail_prob:
            flip = (math.pi / 2.0, -math.pi / 2.0, math.pi)[min(int(u_kind * 3), 2)]
            heading_est += flip
            pivot = np.array(truth.xy) + cfg.symmetry_lever * np.array([math.cos(truth.theta), math.sin(truth.theta)])
            pos = pivot + rot(flip) @ (pos - pivot)

        t = rot(q.heading).T @ (pos - np.array(q.center))
        return CvglFix(
            rotation=Rot2.from_angle(heading_est - q.heading),
            translation=(float(t[0]), float(t[1])),
            weight=w,
        )


class ReplayMatcher:
    """Serves recorded fixes by frame index; every crop of a frame gets the same fix."""

    def __init__(self, fixes: dict[int, CvglFix]) -> None:
        self.fixes = dict(fixes)
        self.n_queries = 0

    def query(self, q: CropQuery, truth: Pose2 | None = None) -> CvglFix | None:
        self.n_queries += 1
        return self.fixes.get(q.frame_index)

    @classmethod
    def from_jsonl(cls, path: str | Path) -> ReplayMatcher:
        return cls(load_fix_log(path))


def query(source: MeasurementSource, q: CropQuery, truth: Pose2 | None = None) -> CvglFix | None:
    return source.query(q, truth)


def fix_to_global(q: CropQuery, f: CvglFix) -> Pose2:
    """Global pose implied by a fix returned for query ``q``."""
    c, s = math.cos(q.heading), math.sin(q.heading)
    tx, ty = f.translation
    return Pose2(
        q.center[0] + c * tx - s * ty,
        q.center[1] + s * tx + c * ty,
        q.heading + f.yaw_residual,
    )


def fix_to_record(frame: int, f: CvglFix) -> dict:
    return {"frame": int(frame), "r": f.rotation.as_list(), "t": list(f.translation), "w": f.weight}


def fix_from_record(rec: dict) -> tuple[int, CvglFix]:
    try:
        frame = int(rec["frame"])
        r = [float(v) for v in rec["r"]]
        t = [float(v) for v in rec["t"]]
        w = float(rec["w"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed fix record {rec!r}: {exc}") from exc
    if len(r) != 4 or len(t) != 2:
        raise ValueError(f"fix record needs 4 rotation and 2 translation entries: {rec!r}")
    return frame, CvglFix(Rot2(*r), (t[0], t[1]), w)


def save_fix_log(path: str | Path, fixes: dict[int, CvglFix]) -> None:
    with open(path, "w") as fh:
        for frame in sorted(fixes):
            fh.write(json.dumps(fix_to_record(frame, fixes[frame])) + "\n")


def load_fix_log(path: str | Path) -> dict[int, CvglFix]:
    fixes: dict[int, CvglFix] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                frame, fix = fix_from_record(json.loads(line))
            except (json.JSONDecodeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            fixes[frame] = fix
    return fixes
