"""Synthetic scenarios, the end-to-end fusion loop, and Monte Carlo studies."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import graph as fg
from .cvgl import CropQuery, CvglFix, MeasurementSource, ReplayMatcher, SimMatcherConfig, SimulatedMatcher, fix_to_global
from .geometry import BodyIncrement, Pose2, Rot2, between, rot, wrap_angle, wrap_angles
from .imu import ImuCalibration, Preintegrator, composite_error, dead_reckon
from .metrics import ate_rmse, path_length_km
from .trigger import TriggerConfig, TriggerState, forward_bias, multicrop_search, trigger_cause, yaw_gate
from .ukf import (
    NumericalError,
    SigmaParams,
    UkfState,
    initial_state,
    measurement_noise_from_weight,
    predict,
    process_noise_from_eps,
    update_position,
)

log = logging.getLogger(__name__)

MAX_CORNER_RADIUS = 10.0


@dataclass(frozen=True)
class ScenarioConfig:
    """Route, sensor rates and noise for one synthetic drive.

    Beyond the core noise terms, ``speed_scale_error`` is a fractional bias on
    the speed channel, and ``blackouts`` lists along-route distance intervals
    (start_m, end_m) where the camera yields no usable match.
    """

    waypoints: tuple[tuple[float, float], ...]
    speed_profile: tuple[float, ...] = (8.2,)
    imu_rate: float = 100.0
    camera_rate: float = 10.0
    gyro_noise: float = 0.002
    accel_bias_walk: float = 0.01
    accel_noise: float = 0.05
    heading_noise: float = 0.005
    speed_scale_error: float = 0.0
    speed_noise: float = 0.0
    blackouts: tuple[tuple[float, float], ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        wps = tuple((float(x), float(y)) for x, y in self.waypoints)
        object.__setattr__(self, "waypoints", wps)
        object.__setattr__(self, "speed_profile", tuple(float(v) for v in self.speed_profile))
        object.__setattr__(self, "blackouts", tuple((float(a), float(b)) for a, b in self.blackouts))
        if len(wps) < 2:
            raise ValueError("scenario needs at least two waypoints")
        if not self.imu_rate >= self.camera_rate > 0.0:
            raise ValueError("need imu_rate >= camera_rate > 0")
        ratio = self.imu_rate / self.camera_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("imu_rate must be an integer multiple of camera_rate")
        if len(self.speed_profile) not in (1, len(wps) - 1):
            raise ValueError("speed_profile needs one speed or one per segment")
        if any(v <= 0.0 for v in self.speed_profile):
            raise ValueError("speeds must be positive")
        for name in ("gyro_noise", "accel_bias_walk", "accel_noise", "heading_noise", "speed_noise"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def frame_ratio(self) -> int:
        return int(round(self.imu_rate / self.camera_rate))

    def segment_speeds(self) -> list[float]:
        n = len(self.waypoints) - 1
        return list(self.speed_profile) * n if len(self.speed_profile) == 1 else list(self.speed_profile)

    def noiseless(self) -> ScenarioConfig:
        return dataclasses.replace(
            self, gyro_noise=0.0, accel_bias_walk=0.0, accel_noise=0.0, heading_noise=0.0,
            speed_scale_error=0.0, speed_noise=0.0,
        )


# --------------------------------------------------------------------------
# ground truth


@dataclass
class Trajectory:
    """Truth sampled at the IMU rate."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    speed: np.ndarray
    s: np.ndarray
    curvature: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def poses(self) -> np.ndarray:
        return np.column_stack([self.x, self.y, self.theta])

    def pose(self, k: int) -> Pose2:
        return Pose2(self.x[k], self.y[k], self.theta[k])


@dataclass
class _Path:
    """Lines and corner arcs; each piece is (s0, length, kind, params)."""

    pieces: list
    length: float
    arc_ranges: list  # (s0, s1, v_in, v_out) for speed blending
    seg_ranges: list  # (s0, s1, v)


def _build_path(waypoints: Sequence[tuple[float, float]], speeds: Sequence[float]) -> _Path:
    pts = np.asarray(waypoints, dtype=float)
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(seg_len < 1e-9):
        raise ValueError("consecutive waypoints coincide")
    dirs = seg / seg_len[:, None]
    n_seg = len(seg)

    # tangent length trimmed from each end of every segment
    trim_start = np.zeros(n_seg)
    trim_end = np.zeros(n_seg)
    corners = []
    for i in range(1, len(pts) - 1):
        u1, u2 = dirs[i - 1], dirs[i]
        phi = math.atan2(u1[0] * u2[1] - u1[1] * u2[0], float(u1 @ u2))
        if abs(phi) < 1e-9:
            corners.append(None)
            continue
        if abs(phi) > math.radians(179.0):
            raise ValueError(f"turn at waypoint {i} is a reversal; split it into two turns")
        half_short = 0.5 * min(seg_len[i - 1], seg_len[i])
        radius = min(MAX_CORNER_RADIUS, half_short)
        tangent = radius * math.tan(abs(phi) / 2.0)
        if tangent > half_short:
            tangent = half_short
            radius = tangent / math.tan(abs(phi) / 2.0)
        trim_end[i - 1] = tangent
        trim_start[i] = tangent
        corners.append((radius, phi))

    pieces, arc_ranges, seg_ranges = [], [], []
    s = 0.0
    for i in range(n_seg):
        a = pts[i] + dirs[i] * trim_start[i]
        line_len = seg_len[i] - trim_start[i] - trim_end[i]
        h = math.atan2(dirs[i][1], dirs[i][0])
        if line_len > 0.0:
            pieces.append((s, line_len, "line", (a[0], a[1], dirs[i][0], dirs[i][1], h)))
        seg_ranges.append((s, s + line_len, speeds[i]))
        s += line_len
        if i < n_seg - 1 and corners[i] is not None:
            radius, phi = corners[i]
            sign = 1.0 if phi > 0 else -1.0
            p0 = pts[i + 1] - dirs[i] * trim_end[i]
            cx = p0[0] - sign * radius * math.sin(h)
            cy = p0[1] + sign * radius * math.cos(h)
            arc_len = radius * abs(phi)
            pieces.append((s, arc_len, "arc", (cx, cy, radius, sign, h)))
            arc_ranges.append((s, s + arc_len, speeds[i], speeds[i + 1]))
            s += arc_len
    return _Path(pieces, s, arc_ranges, seg_ranges)


def _speed_at(path: _Path, s: np.ndarray) -> np.ndarray:
    v = np.empty_like(s)
    v[:] = path.seg_ranges[-1][2]
    for s0, s1, vi in path.seg_ranges:
        v[(s >= s0) & (s < s1)] = vi
    for s0, s1, va, vb in path.arc_ranges:
        m = (s >= s0) & (s < s1)
        v[m] = va + (vb - va) * (s[m] - s0) / (s1 - s0)
    return v


def _eval_path(path: _Path, s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    x = np.empty_like(s)
    y = np.empty_like(s)
    th = np.empty_like(s)
    kappa = np.zeros_like(s)
    starts = np.array([p[0] for p in path.pieces])
    idx = np.clip(np.searchsorted(starts, s, side="right") - 1, 0, len(path.pieces) - 1)
    for k, (s0, length, kind, prm) in enumerate(path.pieces):
        m = idx == k
        if not np.any(m):
            continue
        ds = s[m] - s0
        if kind == "line":
            ax, ay, ux, uy, h = prm
            x[m] = ax + ux * ds
            y[m] = ay + uy * ds
            th[m] = h
        else:
            cx, cy, radius, sign, h0 = prm
            h = h0 + sign * ds / radius
            x[m] = cx + sign * radius * np.sin(h)
            y[m] = cy - sign * radius * np.cos(h)
            th[m] = h
            kappa[m] = sign / radius
    return x, y, wrap_angles(th), kappa


def generate_trajectory(cfg: ScenarioConfig) -> Trajectory:
    """Constant-speed-per-segment path through the waypoints with blended corners."""
    path = _build_path(cfg.waypoints, cfg.segment_speeds())
    # time as a function of arc length on a fine grid, then invert
    grid = np.linspace(0.0, path.length, max(2, int(math.ceil(path.length / 0.01)) + 1))
    inv_v = 1.0 / _speed_at(path, grid)
    t_of_s = np.concatenate([[0.0], np.cumsum(0.5 * (inv_v[1:] + inv_v[:-1]) * np.diff(grid))])
    dt = 1.0 / cfg.imu_rate
    n = int(math.floor(t_of_s[-1] / dt - 1e-9)) + 1
    t = np.arange(n) * dt
    s = np.interp(t, t_of_s, grid)
    x, y, th, kappa = _eval_path(path, s)
    return Trajectory(t, x, y, th, _speed_at(path, s), s, kappa)


def trajectory_from_waypoints(waypoints, speed: float = 8.2, imu_rate: float = 100.0) -> Trajectory:
    return generate_trajectory(ScenarioConfig(tuple(waypoints), (speed,), imu_rate=imu_rate, camera_rate=imu_rate))


# --------------------------------------------------------------------------
# sensors


@dataclass
class ImuStream:
    """Column-oriented IMU log; sample k covers (t[k] - dt[k], t[k]]."""

    t: np.ndarray
    yaw_rate: np.ndarray
    accel_fwd: np.ndarray
    speed: np.ndarray
    heading: np.ndarray
    dt: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def records(self) -> list[dict]:
        cols = (self.t, self.yaw_rate, self.accel_fwd, self.speed, self.heading, self.dt)
        keys = ("t", "yaw_rate", "accel_fwd", "speed", "heading", "dt")
        return [dict(zip(keys, map(float, row))) for row in zip(*cols)]

    @classmethod
    def from_records(cls, recs: Sequence[dict]) -> ImuStream:
        keys = ("t", "yaw_rate", "accel_fwd", "speed", "heading", "dt")
        cols = {k: np.array([float(r[k]) for r in recs]) for k in keys}
        return cls(**cols)


def synthesize_imu(truth: Trajectory, cfg: ScenarioConfig, rng: np.random.Generator | None = None) -> ImuStream:
    """Noisy IMU/compass/speed channels consistent with the truth samples."""
    rng = rng or np.random.default_rng(cfg.seed)
    n = len(truth) - 1
    dt = np.full(n, 1.0 / cfg.imu_rate)
    z = rng.standard_normal((5, n))

    gyro_rate_noise = cfg.gyro_noise / np.sqrt(dt) * z[0]
    heading_walk = np.cumsum(gyro_rate_noise * dt)
    dtheta = wrap_angles(np.diff(truth.theta))
    yaw_rate = dtheta / dt + gyro_rate_noise
    heading = wrap_angles(truth.theta[1:] + heading_walk + cfg.heading_noise * z[1])

    bias = np.cumsum(cfg.accel_bias_walk * np.sqrt(dt) * z[2])
    accel = np.diff(truth.speed) / dt + bias + cfg.accel_noise * z[3]

    speed = np.diff(truth.s) / dt * (1.0 + cfg.speed_scale_error) + cfg.speed_noise * z[4]
    return ImuStream(truth.t[1:].copy(), yaw_rate, accel, speed, heading, dt)


# --------------------------------------------------------------------------
# fusion loop


@dataclass(frozen=True)
class PipelineOptions:
    """Switches for the ablation study and a few run-level knobs."""

    use_yaw_gate: bool = True
    single_crop: bool = False
    isotropic_noise: bool = False
    use_forward_bias: bool = True
    smoother: bool = True
    loop_closures: bool = True
    matcher_enabled: bool = True
    velocity_source: str = "speed"


ABLATIONS: dict[str, PipelineOptions] = {
    "full": PipelineOptions(),
    "no_yaw_gate": PipelineOptions(use_yaw_gate=False),
    "single_crop": PipelineOptions(single_crop=True),
    "isotropic": PipelineOptions(isotropic_noise=True),
    "no_fwd_bias": PipelineOptions(use_forward_bias=False),
}


@dataclass(frozen=True)
class FixEvent:
    frame: int
    status: str  # accepted | rejected_yaw | rejected_miss
    cause: str  # error | time
    pose: Pose2 | None = None
    sigma_fwd: float | None = None
    sigma_lat: float | None = None
    centre_fix: CvglFix | None = None  # winning fix re-expressed against the centre query
    estimate_before: Pose2 | None = None


@dataclass
class FusionOutput:
    frame_t: np.ndarray
    online: np.ndarray
    odometry: list[BodyIncrement]
    odometry_sigmas: list[float]
    odometry_theta_sigmas: list[float]
    events: list[FixEvent]
    eps: np.ndarray
    n_queries: int


class _Blackout:
    """Wraps a source so that listed frames return no match."""

    def __init__(self, inner: MeasurementSource, blocked: np.ndarray) -> None:
        self.inner = inner
        self.blocked = blocked
        self.n_queries = 0

    def query(self, q: CropQuery, truth: Pose2 | None = None) -> CvglFix | None:
        self.n_queries += 1
        if 0 <= q.frame_index < len(self.blocked) and self.blocked[q.frame_index]:
            return None
        return self.inner.query(q, truth)


class _NullSource:
    n_queries = 0

    def query(self, q: CropQuery, truth: Pose2 | None = None) -> None:
        self.n_queries += 1
        return None


def run_fusion(
    stream: ImuStream,
    origin: Pose2,
    source: MeasurementSource,
    frame_ratio: int,
    trigger_cfg: TriggerConfig,
    calibration: ImuCalibration,
    sigma_params: SigmaParams | None = None,
    options: PipelineOptions | None = None,
    truth_frames: np.ndarray | None = None,
) -> FusionOutput:
    """Dead-reckon, trigger, search, gate and fuse over an IMU stream.

    Camera frames fall on every ``frame_ratio``-th IMU sample (frame 0 is the
    start-up instant). At a trigger the UKF prior is formed from the
    preintegrated increment since the last anchor and centres the search; it
    is committed only together with an accepted fix, so between fixes the
    filter mean stays at the last anchor. The online estimate at every frame
    is the corrected preintegrator.
    """
    sigma_params = sigma_params or SigmaParams()
    options = options or PipelineOptions()
    n = len(stream)
    n_frames = n // frame_ratio + 1

    pre = Preintegrator(origin, calibration, velocity_source=options.velocity_source,
                        velocity=float(stream.speed[0]) if n else 0.0)
    ukf = initial_state(origin)
    trig = TriggerState()

    online = np.empty((n_frames, 3))
    online[0] = origin.as_array()
    eps_series = np.zeros(n_frames)
    odometry: list[BodyIncrement] = []
    events: list[FixEvent] = []
    last_frame_pose = origin
    n_queries_before = getattr(source, "n_queries", 0)

    speed, heading, dts, accel = (stream.speed.tolist(), stream.heading.tolist(), stream.dt.tolist(),
                                  stream.accel_fwd.tolist())
    for k in range(n):
        pre.step(speed[k], heading[k], dts[k], accel[k])
        trig.advance(dts[k])
        if (k + 1) % frame_ratio:
            continue
        f = (k + 1) // frame_ratio
        now = pre.position
        odometry.append(between(last_frame_pose, now))
        env = composite_error(pre, calibration, ukf.mean)
        eps_series[f] = env.eps_imu
        qn = process_noise_from_eps(env.eps_imu)

        cause = trigger_cause(trigger_cfg, env.eps_imu, trig)
        if cause is not None:
            # One predict spans the whole anchor-to-now interval, with Q from
            # the envelope accumulated over it; the heading follows the compass.
            try:
                prior = predict(ukf, between(ukf.mean, now), qn, sigma_params)
            except NumericalError as exc:
                raise NumericalError(f"frame {f}: {exc}") from exc
            truth = None if truth_frames is None else Pose2.from_array(truth_frames[f])
            result = multicrop_search(
                trigger_cfg, source, prior.mean, env.eps_imu, f, truth,
                heading=heading[k], use_forward_bias=options.use_forward_bias,
                single_crop=options.single_crop,
            )
            trig.reset()
            if result is None:
                events.append(FixEvent(f, "rejected_miss", cause, estimate_before=now))
            else:
                fix, q = result
                gpose = fix_to_global(q, fix)
                centre_fix = _recentre(trigger_cfg, prior.mean, env.eps_imu, q, gpose, fix, options)
                if options.use_yaw_gate and not yaw_gate(trigger_cfg, fix):
                    events.append(FixEvent(f, "rejected_yaw", cause, gpose, centre_fix=centre_fix,
                                           estimate_before=now))
                else:
                    r = measurement_noise_from_weight(fix.weight)
                    r_used = r.isotropic() if options.isotropic_noise else r
                    try:
                        ukf = update_position(prior, gpose.xy, r_used, heading[k], sigma_params)
                    except NumericalError as exc:
                        raise NumericalError(f"frame {f}: {exc}") from exc
                    pre.reset_position_anchor(ukf.mean.xy)
                    events.append(FixEvent(f, "accepted", cause, gpose, r.sigma_fwd_w, r.sigma_lat_w,
                                           centre_fix, estimate_before=now))
        last_frame_pose = pre.position
        online[f] = (last_frame_pose.x, last_frame_pose.y, last_frame_pose.theta)

    frame_t = np.concatenate([[stream.t[0] - stream.dt[0]] if n else [0.0],
                              stream.t[frame_ratio - 1::frame_ratio][: n_frames - 1]])
    n_queries = getattr(source, "n_queries", 0) - n_queries_before
    accepted = [e.frame for e in events if e.status == "accepted"]
    odo_sigmas, odo_theta_sigmas = interval_odometry_sigmas(eps_series, accepted)
    return FusionOutput(frame_t, online, odometry, odo_sigmas, odo_theta_sigmas, events, eps_series, n_queries)


def interval_odometry_sigmas(eps: np.ndarray, accepted_frames: Sequence[int]) -> tuple[list[float], list[float]]:
    """Per-frame odometry sigmas (position, heading) that add up to the filter's process noise.

    The filter applies Q(eps) once over each anchor-to-fix interval. Spreading
    that variance evenly over the k frame steps of the interval gives each step
    sigma / sqrt(k), so the graph and the filter agree on how far the
    preintegrated chain may bend between fixes. Steps after the last fix use
    the envelope at the final frame.
    """
    n = len(eps)
    bounds = [f for f in sorted(set(accepted_frames)) if 0 < f < n]
    if not bounds or bounds[-1] != n - 1:
        bounds.append(n - 1)
    pos: list[float] = []
    head: list[float] = []
    start = 0
    for b in bounds:
        k = b - start
        if k <= 0:
            continue
        q = process_noise_from_eps(float(eps[b]))
        root = math.sqrt(k)
        pos.extend([0.5 * (q.sigma_fwd + q.sigma_lat) / root] * k)
        head.extend([q.sigma_theta / root] * k)
        start = b
    return pos, head


def _recentre(cfg, ukf_pose: Pose2, eps: float, q: CropQuery, gpose: Pose2, fix: CvglFix,
              options: PipelineOptions) -> CvglFix:
    # express the winning fix against the search centre so a replay of the
    # log (which serves one fix per frame) lands on the same global pose
    shift = forward_bias(cfg, eps) if options.use_forward_bias else 0.0
    c, s = math.cos(ukf_pose.theta), math.sin(ukf_pose.theta)
    centre = np.array([ukf_pose.x + c * shift, ukf_pose.y + s * shift])
    t = rot(q.heading).T @ (np.array(gpose.xy) - centre)
    return CvglFix(fix.rotation, (float(t[0]), float(t[1])), fix.weight)


def fusion_graph(fusion: FusionOutput, origin: Pose2, loop_closures: bool = True) -> fg.FactorGraph:
    traj = [Pose2.from_array(p) for p in fusion.online]
    fixes = [
        fg.FixNode(e.frame, e.pose, e.sigma_fwd, e.sigma_lat)
        for e in fusion.events if e.status == "accepted"
    ]
    return fg.build_graph(traj, fusion.odometry, fusion.odometry_sigmas, fixes, origin,
                          odometry_theta_sigma=fusion.odometry_theta_sigmas, loop_closures=loop_closures)


def smooth_trajectory(g: fg.FactorGraph) -> tuple[np.ndarray, fg.LMResult]:
    """Factor-graph optimisation of the online estimate, then Savitzky-Golay on x/y."""
    res = fg.optimize(g)
    opt = np.array([p.as_array() for p in res.poses])
    out = opt.copy()
    out[:, 0] = fg.savgol_smooth(opt[:, 0])
    out[:, 1] = fg.savgol_smooth(opt[:, 1])
    return out, res


@dataclass
class RunResult:
    """All trajectory series share the frame timestamps ``t``; ``truth`` is None for replays."""

    t: np.ndarray
    truth: np.ndarray | None
    imu_only: np.ndarray
    ukf_online: np.ndarray
    smoothed: np.ndarray
    fixes: list[tuple[int, str]]
    trigger_events: list[tuple[int, str]]
    events: list[FixEvent] = field(repr=False)
    imu: ImuStream | None = field(default=None, repr=False)
    origin: Pose2 | None = None
    n_loop_closures: int = 0
    n_queries: int = 0

    @property
    def length_km(self) -> float:
        return path_length_km(self.truth)

    @property
    def accepted_frames(self) -> list[int]:
        return [f for f, status in self.fixes if status == "accepted"]

    def trigger_errors(self) -> np.ndarray:
        """True position error of the online estimate at each trigger, before any update."""
        return np.array([
            math.hypot(e.estimate_before.x - self.truth[e.frame, 0], e.estimate_before.y - self.truth[e.frame, 1])
            for e in self.events
        ])

    def frame_errors(self, series: str = "ukf_online") -> np.ndarray:
        est = getattr(self, series)
        return np.hypot(est[:, 0] - self.truth[:, 0], est[:, 1] - self.truth[:, 1])

    def fix_log(self) -> dict[int, CvglFix]:
        return {e.frame: e.centre_fix for e in self.events if e.centre_fix is not None}


def run_pipeline(
    scenario: ScenarioConfig,
    trigger_cfg: TriggerConfig | None = None,
    matcher_cfg: SimMatcherConfig | None = None,
    sigma_params: SigmaParams | None = None,
    options: PipelineOptions | None = None,
    calibration: ImuCalibration | None = None,
    truth: Trajectory | None = None,
) -> RunResult:
    """Simulate one drive end to end: truth, sensors, online fusion, smoothing."""
    trigger_cfg = trigger_cfg or TriggerConfig()
    options = options or PipelineOptions()
    ss = np.random.SeedSequence(scenario.seed)
    imu_ss, matcher_ss = ss.spawn(2)
    matcher_cfg = dataclasses.replace(
        matcher_cfg or SimMatcherConfig(), rng_seed=int(matcher_ss.generate_state(1)[0])
    )
    calibration = calibration or ImuCalibration(sigma_omega=max(scenario.gyro_noise, 1e-4))

    truth = truth if truth is not None else generate_trajectory(scenario)
    stream = synthesize_imu(truth, scenario, np.random.default_rng(imu_ss))
    ratio = scenario.frame_ratio
    frame_idx = np.arange(0, len(truth), ratio)
    truth_frames = truth.poses()[frame_idx]
    origin = truth.pose(0)

    if options.matcher_enabled:
        source: MeasurementSource = SimulatedMatcher(matcher_cfg)
        if scenario.blackouts:
            s_frames = truth.s[frame_idx]
            blocked = np.zeros(len(frame_idx), dtype=bool)
            for a, b in scenario.blackouts:
                blocked |= (s_frames >= a) & (s_frames < b)
            source = _Blackout(source, blocked)
    else:
        source = _NullSource()

    fusion = run_fusion(stream, origin, source, ratio, trigger_cfg, calibration, sigma_params, options, truth_frames)
    return _finish(fusion, stream, origin, ratio, options, truth_frames)


def run_replay(
    stream: ImuStream,
    fixes: dict[int, CvglFix],
    origin: Pose2,
    frame_ratio: int,
    trigger_cfg: TriggerConfig | None = None,
    calibration: ImuCalibration | None = None,
    sigma_params: SigmaParams | None = None,
    options: PipelineOptions | None = None,
) -> RunResult:
    """Run the fusion loop over a recorded IMU log and fix log."""
    options = options or PipelineOptions()
    source = ReplayMatcher(fixes)
    fusion = run_fusion(stream, origin, source, frame_ratio, trigger_cfg or TriggerConfig(),
                        calibration or ImuCalibration(), sigma_params, options)
    return _finish(fusion, stream, origin, frame_ratio, options, None)


def _finish(fusion: FusionOutput, stream: ImuStream, origin: Pose2, ratio: int, options: PipelineOptions,
            truth_frames: np.ndarray | None) -> RunResult:
    n_frames = len(fusion.online)
    dr = dead_reckon(stream.speed, stream.heading, stream.dt, origin)[::ratio][:n_frames]
    if options.smoother:
        g = fusion_graph(fusion, origin, options.loop_closures)
        smoothed, _ = smooth_trajectory(g)
        n_loops = g.count("loop_closure")
    else:
        smoothed, n_loops = fusion.online.copy(), 0
    return RunResult(
        t=fusion.frame_t,
        truth=truth_frames,
        imu_only=dr,
        ukf_online=fusion.online,
        smoothed=smoothed,
        fixes=[(e.frame, e.status) for e in fusion.events],
        trigger_events=[(e.frame, e.cause) for e in fusion.events],
        events=fusion.events,
        imu=stream,
        origin=origin,
        n_loop_closures=n_loops,
        n_queries=fusion.n_queries,
    )


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass
class SeedOutcome:
    seed: int
    ate_smoothed: float
    ate_online: float
    ate_imu_only: float
    length_km: float
    accepted: int
    triggers: int


def _run_one(args) -> SeedOutcome:
    scenario, trigger_cfg, matcher_cfg, options = args
    res = run_pipeline(scenario, trigger_cfg, matcher_cfg, options=options)
    return SeedOutcome(
        seed=scenario.seed,
        ate_smoothed=ate_rmse(res.smoothed, res.truth),
        ate_online=ate_rmse(res.ukf_online, res.truth),
        ate_imu_only=ate_rmse(res.imu_only, res.truth),
        length_km=res.length_km,
        accepted=len(res.accepted_frames),
        triggers=len(res.trigger_events),
    )


def _map(fn, jobs: list, workers: int | None):
    workers = workers if workers is not None else (os.cpu_count() or 1)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def seeds_for(scenario: ScenarioConfig, n_seeds: int) -> list[ScenarioConfig]:
    if n_seeds < 1:
        raise ValueError("n_seeds must be at least 1")
    return [dataclasses.replace(scenario, seed=scenario.seed + i) for i in range(n_seeds)]


def monte_carlo(
    scenario: ScenarioConfig,
    n_seeds: int,
    configs: dict[str, PipelineOptions] | None = None,
    trigger_cfg: TriggerConfig | None = None,
    matcher_cfg: SimMatcherConfig | None = None,
    workers: int | None = None,
) -> dict[str, list[SeedOutcome]]:
    """Run every configuration over the same seeds; results ordered by seed."""
    configs = configs if configs is not None else {"full": PipelineOptions()}
    trigger_cfg = trigger_cfg or TriggerConfig()
    matcher_cfg = matcher_cfg or SimMatcherConfig()
    scen = seeds_for(scenario, n_seeds)
    jobs = [(s, trigger_cfg, matcher_cfg, opt) for opt in configs.values() for s in scen]
    outcomes = _map(_run_one, jobs, workers)
    out = {}
    for i, name in enumerate(configs):
        out[name] = outcomes[i * n_seeds:(i + 1) * n_seeds]
    return out


def summarize(values: Sequence[float]) -> dict[str, float]:
    a = np.asarray(values, dtype=float)
    return {
        "median": float(np.median(a)),
        "p25": float(np.percentile(a, 25)),
        "p75": float(np.percentile(a, 75)),
        "p90": float(np.percentile(a, 90)),
        "mean": float(np.mean(a)),
    }


def ablation_table(results: dict[str, list[SeedOutcome]]) -> list[dict]:
    """Rows for full, each single ablation, and the online-only (no smoother) view of full."""
    rows = []
    for name, outs in results.items():
        ate = [o.ate_smoothed for o in outs]
        per_km = [o.ate_smoothed / o.length_km for o in outs]
        rows.append({"config": name, **{f"ate_{k}": v for k, v in summarize(ate).items()},
                     "ate_per_km_median": float(np.median(per_km))})
    if "full" in results:
        outs = results["full"]
        ate = [o.ate_online for o in outs]
        per_km = [o.ate_online / o.length_km for o in outs]
        rows.append({"config": "ukf_only", **{f"ate_{k}": v for k, v in summarize(ate).items()},
                     "ate_per_km_median": float(np.median(per_km))})
    return rows


def run_ablation(
    scenario: ScenarioConfig,
    n_seeds: int,
    trigger_cfg: TriggerConfig | None = None,
    matcher_cfg: SimMatcherConfig | None = None,
    workers: int | None = None,
) -> list[dict]:
    return ablation_table(monte_carlo(scenario, n_seeds, ABLATIONS, trigger_cfg, matcher_cfg, workers))


# --------------------------------------------------------------------------
# stock scenarios


def urban_grid_waypoints(block: float = 120.0, target_length: float = 4000.0) -> tuple[tuple[float, float], ...]:
    """A staircase-and-loop urban route of ``target_length`` metres of polyline.

    Heads north-east through a grid of ``block``-sized blocks and goes once
    around a block per repetition so that the route revisits itself.
    """
    b = block
    pattern = [(2 * b, 0), (0, b), (b, 0), (0, 2 * b), (b, 0), (0, -b), (-b, 0), (0, b), (2 * b, 0), (0, b)]
    pts = [(0.0, 0.0)]
    remaining = target_length
    i = 0
    while remaining > 1e-9:
        dx, dy = pattern[i % len(pattern)]
        leg = math.hypot(dx, dy)
        f = min(1.0, remaining / leg)
        x, y = pts[-1]
        pts.append((x + f * dx, y + f * dy))
        remaining -= f * leg
        i += 1
    return tuple(pts)


def reference_scenario(seed: int = 0) -> ScenarioConfig:
    """The ~4 km urban-grid drive with calibrated gyro and accelerometer noise."""
    return ScenarioConfig(waypoints=urban_grid_waypoints(), speed_profile=(8.2,), gyro_noise=0.002,
                          accel_bias_walk=0.01, seed=seed)


def tunnel_route_waypoints(block: float = 120.0) -> tuple[tuple[float, float], ...]:
    """Urban grid, then a 1.2 km straight arterial, then grid again (about 3 km)."""
    b = block
    legs = [(2 * b, 0), (0, b), (b, 0), (0, 2 * b), (b, 0), (0, b), (1200.0, 0), (0, b), (-b, 0), (0, b),
            (2 * b, 0), (0, -b), (b, 0)]
    pts = [(0.0, 0.0)]
    for dx, dy in legs:
        x, y = pts[-1]
        pts.append((x + dx, y + dy))
    return tuple(pts)


def ablation_scenario(seed: int = 0) -> ScenarioConfig:
    """Drive with injected drift: a 650 m tunnel on the arterial and a speed under-read."""
    return ScenarioConfig(
        waypoints=tunnel_route_waypoints(),
        speed_profile=(8.2,),
        gyro_noise=0.002,
        accel_bias_walk=0.01,
        speed_scale_error=-0.05,
        blackouts=((1250.0, 1900.0),),
        seed=seed,
    )


ABLATION_MATCHER = SimMatcherConfig(symmetry_fail_prob=0.15)
