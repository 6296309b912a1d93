"""Trajectory CSV, IMU JSONL and event CSV readers and writers."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .simulation import FixEvent, ImuStream

TRAJECTORY_COLUMNS = ("t", "x", "y", "theta")
IMU_KEYS = ("t", "yaw_rate", "accel_fwd", "speed", "heading", "dt")
EVENT_COLUMNS = ("frame", "t", "cause", "status")


def _fmt(v: float) -> str:
    # shortest repr that round-trips exactly
    return repr(float(v))


def write_trajectory_csv(path: str | Path, t: np.ndarray, poses: np.ndarray) -> None:
    poses = np.asarray(poses, dtype=float)
    if len(t) != len(poses):
        raise ValueError("timestamps and poses differ in length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for ti, p in zip(t, poses):
            w.writerow([_fmt(ti), _fmt(p[0]), _fmt(p[1]), _fmt(p[2])])


def read_trajectory_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(t, poses)`` with poses shaped (n, 3)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file, expected header {','.join(TRAJECTORY_COLUMNS)}")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in TRAJECTORY_COLUMNS if c not in header]
    if missing:
        raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
    idx = [header.index(c) for c in TRAJECTORY_COLUMNS]
    data = np.empty((len(rows) - 1, 4))
    for i, row in enumerate(rows[1:]):
        try:
            data[i] = [float(row[j]) for j in idx]
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{i + 2}: bad trajectory row {row!r}") from exc
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite values in trajectory")
    if np.any(np.diff(data[:, 0]) < 0.0):
        raise ValueError(f"{path}: timestamps must be non-decreasing")
    return data[:, 0], data[:, 1:]


def write_imu_jsonl(path: str | Path, stream: ImuStream) -> None:
    with open(path, "w") as fh:
        for rec in stream.records():
            fh.write(json.dumps(rec) + "\n")


def read_imu_jsonl(path: str | Path) -> ImuStream:
    recs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
            for key in IMU_KEYS:
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
                v = rec[key]
                if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                    raise ValueError(f"{path}:{lineno}: field {key!r} must be a finite number, got {v!r}")
            if rec["dt"] <= 0.0:
                raise ValueError(f"{path}:{lineno}: field 'dt' must be positive")
            recs.append(rec)
    if not recs:
        raise ValueError(f"{path}: no IMU records")
    return ImuStream.from_records(recs)


def write_events_csv(path: str | Path, events: list[FixEvent], frame_t: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_COLUMNS)
        for e in events:
            w.writerow([e.frame, _fmt(frame_t[e.frame]), e.cause, e.status])


def read_events_csv(path: str | Path) -> list[tuple[int, str, str]]:
    """``(frame, cause, status)`` per trigger event."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in EVENT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for lineno, row in enumerate(reader, 2):
            try:
                out.append((int(row["frame"]), row["cause"], row["status"]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad frame index {row['frame']!r}") from exc
    return out


def write_metrics_csv(path: str | Path, rows: dict[str, dict]) -> None:
    """One row per trajectory series; ``None`` values are written as empty cells."""
    keys: list[str] = []
    for r in rows.values():
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", *keys])
        for name, r in rows.items():
            w.writerow([name, *("" if r.get(k) is None else _fmt(r[k]) for k in keys)])


def read_metrics_csv(path: str | Path) -> dict[str, dict[str, float | None]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return {
            row["series"]: {k: (None if v == "" else float(v)) for k, v in row.items() if k != "series"}
            for row in reader
        }
