import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from taco.geometry import Pose2
from taco.imu import (
    ImuCalibration,
    ImuSample,
    Preintegrator,
    along_track_error,
    combine_envelope,
    composite_error,
    cross_track_error,
    dead_reckon,
    integrate,
    reset_position_anchor,
)
from taco.simulation import ScenarioConfig, generate_trajectory, synthesize_imu

nonneg = st.floats(0.0, 1e4, allow_nan=False)


def sample(speed=10.0, heading=0.0, dt=0.1, accel=0.0):
    return ImuSample(yaw_rate=0.0, accel_fwd=accel, speed=speed, heading_abs=heading, dt=dt)


def test_integrate_forward_step():
    pre = integrate(Preintegrator(Pose2(0, 0, 0)), sample())
    p = pre.position
    assert (p.x, p.y, p.theta) == pytest.approx((1.0, 0.0, 0.0), abs=1e-12)
    assert pre.distance == pytest.approx(1.0, abs=1e-12)
    assert pre.elapsed == pytest.approx(0.1, abs=1e-12)


def test_integrate_stationary():
    pre = Preintegrator(Pose2(3, 4, 0.5))
    pre.integrate(sample(speed=0.0, heading=0.5))
    assert pre.position == Pose2(3, 4, 0.5)
    assert pre.elapsed == pytest.approx(0.1)
    assert pre.distance == 0.0


def test_distance_is_sum_of_speed_dt():
    pre = Preintegrator(Pose2(0, 0, 0))
    for _ in range(100):
        pre.integrate(sample(speed=8.2, dt=0.01))
    assert pre.distance == pytest.approx(8.2, abs=1e-12)


def test_heading_follows_compass_deltas_across_the_seam():
    pre = Preintegrator(Pose2(0, 0, math.pi - 0.01))
    pre.integrate(sample(speed=0.0, heading=-math.pi + 0.01))
    assert pre.position.theta == pytest.approx(-math.pi + 0.01, abs=1e-12)


@pytest.mark.parametrize(
    "kw",
    [dict(speed=math.nan), dict(heading=math.inf), dict(accel=math.nan)],
)
def test_non_finite_sample_rejected(kw):
    with pytest.raises(ValueError):
        sample(**kw)
    pre = Preintegrator(Pose2(0, 0, 0))
    args = dict(speed=1.0, heading=0.0, dt=0.01, accel=0.0)
    args.update(kw)
    with pytest.raises(ValueError):
        pre.step(args["speed"], args["heading"], args["dt"], args["accel"])


def test_non_positive_dt_rejected():
    with pytest.raises(ValueError):
        sample(dt=0.0)
    with pytest.raises(ValueError):
        Preintegrator(Pose2(0, 0, 0)).step(1.0, 0.0, -0.01)


def test_calibration_validation():
    with pytest.raises(ValueError):
        ImuCalibration(sigma_omega=0.0)
    with pytest.raises(ValueError):
        ImuCalibration(accel_hp_cutoff=-1.0)


@pytest.mark.parametrize(
    "d, sigma, t, expected",
    [
        (100.0, 0.001, 0.0, 0.0),
        (100.0, 0.001, 10.0, 3 * 100 * 0.001 * math.sqrt(10)),
        (1000.0, 0.002, 100.0, 60.0),
    ],
)
def test_cross_track_examples(d, sigma, t, expected):
    assert abs(cross_track_error(ImuCalibration(sigma_omega=sigma), d, t) - expected) <= 1e-12
    if t == 10.0:
        assert expected == pytest.approx(0.9487, abs=1e-4)


def test_along_track_examples():
    assert along_track_error(Preintegrator(Pose2(0, 0, 0))) == 0.0
    pre = Preintegrator(Pose2(0, 0, 0))
    for _ in range(50):
        pre.integrate(sample(accel=0.7, dt=0.01))
    assert along_track_error(pre) == 0.0
    fake = SimpleNamespace(accel_residual_std=0.05, elapsed=4.0)
    assert abs(along_track_error(fake) - 0.4) <= 1e-12


def test_accel_window_std_matches_high_pass_oracle():
    rng = np.random.default_rng(3)
    accel = 0.3 + 0.1 * rng.standard_normal(400)
    dt = 0.01
    cal = ImuCalibration(accel_hp_cutoff=0.5)
    pre = Preintegrator(Pose2(0, 0, 0), cal)
    for a in accel:
        pre.step(5.0, 0.0, dt, a)
    rc = 1.0 / (2 * math.pi * 0.5)
    alpha = rc / (rc + dt)
    out, prev_x, prev_y = [], accel[0], 0.0
    for a in accel:
        prev_y = alpha * (prev_y + a - prev_x)
        prev_x = a
        out.append(prev_y)
    assert pre.accel_residual_std == pytest.approx(np.std(out, ddof=1), rel=1e-10)
    assert along_track_error(pre) == pytest.approx(0.5 * np.std(out, ddof=1) * 4.0**2, rel=1e-10)


@pytest.mark.parametrize(
    "cross, along, d_div, expected",
    [(0.0, 0.0, 0.0, 0.0), (0.9, 0.4, 10.0, 0.9), (0.1, 0.05, 20.0, 0.6)],
)
def test_combine_envelope_examples(cross, along, d_div, expected):
    assert combine_envelope(cross, along, d_div).eps_imu == pytest.approx(expected, abs=1e-12)


def test_composite_fresh_anchor_is_zero():
    pre = Preintegrator(Pose2(1, 2, 0.3))
    env = composite_error(pre, ImuCalibration(), pre.position)
    assert (env.eps_cross, env.eps_along, env.eps_imu, env.d_div) == (0.0, 0.0, 0.0, 0.0)


def test_composite_reports_divergence_chord():
    pre = Preintegrator(Pose2(0, 0, 0))
    env = composite_error(pre, ImuCalibration(), Pose2(30, 40, 0))
    assert env.d_div == pytest.approx(50.0)
    assert env.eps_imu == pytest.approx(1.5)


def test_reset_position_anchor():
    pre = Preintegrator(Pose2(0, 0, math.pi / 4), velocity=8.2)
    for _ in range(10):
        pre.integrate(sample(speed=8.2, heading=math.pi / 4, accel=0.1))
    reset_position_anchor(pre, (4.0, 6.0))
    p = pre.position
    assert (p.x, p.y) == (4.0, 6.0)
    assert p.theta == pytest.approx(math.pi / 4)
    assert pre.distance == 0.0 and pre.elapsed == 0.0
    assert pre.accel_residual_count == 0
    assert pre.velocity == 8.2
    own = pre.position
    pre.reset_position_anchor(own.xy)
    assert pre.position == own


def test_reset_rejects_non_finite():
    with pytest.raises(ValueError):
        Preintegrator(Pose2(0, 0, 0)).reset_position_anchor((math.nan, 0.0))


def test_accel_velocity_source_integrates_acceleration():
    pre = Preintegrator(Pose2(0, 0, 0), velocity_source="accel", velocity=2.0)
    for _ in range(100):
        pre.step(speed=99.0, heading_abs=0.0, dt=0.01, accel_fwd=1.0)
    assert pre.velocity == pytest.approx(3.0)
    # rectangular rule: sum of v_k dt with v_k = 2 + 0.01 k
    assert pre.position.x == pytest.approx(sum((2.0 + 0.01 * k) * 0.01 for k in range(100)))
    with pytest.raises(ValueError):
        Preintegrator(Pose2(0, 0, 0), velocity_source="wheel")


def test_dead_reckon_matches_preintegrator_loop():
    rng = np.random.default_rng(0)
    n = 500
    speed = 8 + rng.standard_normal(n)
    heading = np.cumsum(0.01 * rng.standard_normal(n))
    origin = Pose2(5, -3, 0.2)
    pre = Preintegrator(origin)
    rows = [origin.as_array()]
    for v, h in zip(speed, heading):
        pre.step(v, h, 0.01)
        rows.append(pre.position.as_array())
    dr = dead_reckon(speed, heading, 0.01, origin)
    assert np.allclose(dr, np.array(rows), atol=1e-9)


def test_noiseless_dead_reckoning_tracks_truth():
    cfg = ScenarioConfig(waypoints=((0, 0), (200, 0), (200, 150), (-50, 150)), speed_profile=(8.2,)).noiseless()
    truth = generate_trajectory(cfg)
    imu = synthesize_imu(truth, cfg)
    origin = truth.pose(0)
    pre = Preintegrator(origin)
    worst = 0.0
    for k in range(len(imu)):
        pre.step(imu.speed[k], imu.heading[k], imu.dt[k])
        worst = max(worst, math.hypot(pre.position.x - truth.x[k + 1], pre.position.y - truth.y[k + 1]) / max(pre.distance, 1e-9))
    assert worst < 1e-3


@given(nonneg, nonneg, nonneg, nonneg)
def test_cross_track_monotone(d, t, dd, dt):
    cal = ImuCalibration(sigma_omega=0.002)
    base = cross_track_error(cal, d, t)
    assert cross_track_error(cal, d + dd, t) >= base
    assert cross_track_error(cal, d, t + dt) >= base


@given(nonneg, nonneg, nonneg)
def test_composite_is_max_of_terms(cross, along, d_div):
    env = combine_envelope(cross, along, d_div)
    terms = (cross, along, 0.03 * d_div)
    assert all(env.eps_imu >= v for v in terms)
    assert env.eps_imu in terms


@given(st.lists(st.tuples(st.floats(0, 30), st.floats(-3, 3), st.floats(-2, 2)), min_size=1, max_size=50),
       st.tuples(st.floats(-500, 500), st.floats(-500, 500)))
def test_reset_zeroes_envelope(steps, anchor):
    pre = Preintegrator(Pose2(0, 0, 0))
    for v, h, a in steps:
        pre.step(v, h, 0.01, a)
        assert pre.distance >= 0.0
    pre.reset_position_anchor(anchor)
    assert composite_error(pre, ImuCalibration(), pre.position).eps_imu == 0.0


@given(st.lists(st.floats(0, 40), min_size=2, max_size=60))
def test_distance_non_decreasing(speeds):
    pre = Preintegrator(Pose2(0, 0, 0))
    last = 0.0
    for v in speeds:
        pre.step(v, 0.0, 0.01)
        assert pre.distance >= last
        last = pre.distance
