"""Command-line entry point: simulate, replay, ablate, metrics."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import formats
from .cvgl import load_fix_log, save_fix_log
from .geometry import Pose2
from .metrics import associate, compute_metrics
from .simulation import ABLATIONS, RunResult, ablation_table, monte_carlo, run_pipeline, run_replay

log = logging.getLogger("taco")

SERIES_FILES = {"imu_only": "imu_only.csv", "ukf_online": "ukf.csv", "smoothed": "smoothed.csv"}


def _metrics_rows(res: RunResult, truth: np.ndarray) -> dict[str, dict]:
    accepted = res.accepted_frames
    rows = {}
    for name in SERIES_FILES:
        # dead reckoning never takes fixes, so it reports none
        frames = () if name == "imu_only" else accepted
        rows[name] = compute_metrics(getattr(res, name), truth, frames).as_row()
    return rows


def _write_outputs(res: RunResult, out: Path, truth: np.ndarray | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if truth is not None and res.truth is not None:
        formats.write_trajectory_csv(out / "truth.csv", res.t, truth)
    for name, fname in SERIES_FILES.items():
        formats.write_trajectory_csv(out / fname, res.t, getattr(res, name))
    formats.write_events_csv(out / "events.csv", res.events, res.t)
    if truth is not None:
        formats.write_metrics_csv(out / "metrics.csv", _metrics_rows(res, truth))


def _print_metrics(rows: dict[str, dict]) -> None:
    print(f"{'series':<10} {'ATE (m)':>9} {'m/km':>8} {'steady (m)':>11} {'fixes/km':>9} {'km':>7}")
    for name, r in rows.items():
        steady = "-" if r["steady_state_rmse"] is None else f"{r['steady_state_rmse']:.3f}"
        print(f"{name:<10} {r['ate_rmse']:9.3f} {r['drift_rate']:8.3f} {steady:>11} "
              f"{r['fixes_per_km']:9.2f} {r['trajectory_length']:7.3f}")


def cmd_simulate(args) -> int:
    rc = cfgmod.load_config(args.scenario)
    if rc.scenario is None:
        raise cfgmod.ConfigError("scenario: section is required for simulate")
    scen = rc.scenario if args.seed is None else dataclasses.replace(rc.scenario, seed=args.seed)
    res = run_pipeline(scen, rc.trigger, rc.matcher, options=rc.options, calibration=rc.calibration)
    out = Path(args.out)
    _write_outputs(res, out, res.truth)
    formats.write_imu_jsonl(out / "imu.jsonl", res.imu)
    save_fix_log(out / "fixes.jsonl", res.fix_log())
    replay_cfg = dataclasses.replace(rc, scenario=None, origin=res.origin, frame_ratio=scen.frame_ratio,
                                     calibration=rc.resolved_calibration() if rc.calibration is None else rc.calibration)
    cfgmod.save_config(out / "replay.cfg", replay_cfg)
    _print_metrics(_metrics_rows(res, res.truth))
    print(f"wrote {out}/: truth.csv imu_only.csv ukf.csv smoothed.csv metrics.csv events.csv imu.jsonl fixes.jsonl replay.cfg")
    return 0


def _parse_origin(text: str) -> Pose2:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ValueError(f"--origin: {exc}") from exc
    if len(vals) != 3:
        raise ValueError("--origin: expected 'x,y,theta'")
    return Pose2(*vals)


def cmd_replay(args) -> int:
    rc = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    stream = formats.read_imu_jsonl(args.imu)
    fixes = load_fix_log(args.fixes)
    if args.origin:
        origin = _parse_origin(args.origin)
    elif rc.origin is not None:
        origin = rc.origin
    else:
        origin = Pose2(0.0, 0.0, float(stream.heading[0]))
        log.warning("no origin given; starting at (0, 0) with the first compass heading")
    res = run_replay(stream, fixes, origin, rc.resolved_frame_ratio(), rc.trigger,
                     rc.resolved_calibration(), options=rc.options)
    truth = None
    if args.truth:
        t_truth, truth_poses = formats.read_trajectory_csv(args.truth)
        truth = truth_poses[_match(res.t, t_truth, args.imu_rate)]
    _write_outputs(res, Path(args.out), truth)
    if truth is not None:
        _print_metrics(_metrics_rows(res, truth))
    print(f"replayed {len(stream)} IMU samples, {len(res.accepted_frames)} accepted fixes; wrote {args.out}/")
    return 0


def _match(t_est: np.ndarray, t_truth: np.ndarray, imu_rate: float) -> np.ndarray:
    if len(t_est) == len(t_truth) and np.array_equal(t_est, t_truth):
        return np.arange(len(t_truth))
    return associate(t_truth, t_est, 0.5 / imu_rate)


def cmd_metrics(args) -> int:
    t_est, est = formats.read_trajectory_csv(args.est)
    t_truth, truth = formats.read_trajectory_csv(args.truth)
    truth = truth[_match(t_est, t_truth, args.imu_rate)]
    accepted: list[int] = []
    if args.events:
        accepted = [f for f, _, status in formats.read_events_csv(args.events) if status == "accepted"]
        if any(not 0 <= f < len(est) for f in accepted):
            raise ValueError(f"{args.events}: event frame outside the trajectory")
    m = compute_metrics(est, truth, accepted)
    _print_metrics({Path(args.est).stem: m.as_row()})
    return 0


def cmd_ablate(args) -> int:
    rc = cfgmod.load_config(args.scenario)
    if rc.scenario is None:
        raise cfgmod.ConfigError("scenario: section is required for ablate")
    scen = rc.scenario if args.seed is None else dataclasses.replace(rc.scenario, seed=args.seed)
    results = monte_carlo(scen, args.seeds, ABLATIONS, rc.trigger, rc.matcher, workers=args.workers)
    rows = ablation_table(results)
    lines = [
        "| config | median ATE (m) | p25 | p75 | p90 | median ATE/km |",
        "|---|---:|---:|---:|---:|---:|",
    ]
    for r in rows:
        lines.append(f"| {r['config']} | {r['ate_median']:.2f} | {r['ate_p25']:.2f} | {r['ate_p75']:.2f} "
                     f"| {r['ate_p90']:.2f} | {r['ate_per_km_median']:.2f} |")
    table = "\n".join(lines)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.md").write_text(table + "\n")
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taco", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one synthetic drive and export trajectories")
    s.add_argument("--scenario", required=True, help="scenario config file")
    s.add_argument("--seed", type=int, help="override the scenario seed")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("replay", help="fuse a recorded IMU log with a recorded fix log")
    r.add_argument("--imu", required=True, help="IMU JSONL log")
    r.add_argument("--fixes", required=True, help="fix JSONL log")
    r.add_argument("--config", help="config file (trigger, imu, pipeline, replay sections)")
    r.add_argument("--origin", help="start pose 'x,y,theta' (overrides the config)")
    r.add_argument("--truth", help="truth trajectory CSV for metrics")
    r.add_argument("--imu-rate", type=float, default=100.0, help="IMU rate for timestamp association")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_replay)

    a = sub.add_parser("ablate", help="run the component ablation matrix over many seeds")
    a.add_argument("--scenario", required=True, help="scenario config file")
    a.add_argument("--seeds", type=int, default=50, help="number of seeds")
    a.add_argument("--seed", type=int, help="first seed (default: the scenario's)")
    a.add_argument("--workers", type=int, default=None, help="worker processes (default: CPU count)")
    a.add_argument("--out", help="directory for ablation.md and ablation.csv")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("metrics", help="metrics of an estimated trajectory against truth")
    m.add_argument("--est", required=True, help="estimated trajectory CSV")
    m.add_argument("--truth", required=True, help="truth trajectory CSV")
    m.add_argument("--events", help="events CSV from simulate/replay (for steady-state and fixes/km)")
    m.add_argument("--imu-rate", type=float, default=100.0, help="IMU rate for timestamp association")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, ArithmeticError) as exc:
        print(f"taco {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
