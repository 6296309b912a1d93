"""Offline SE(2) smoother: Pose2 factor graph, Levenberg-Marquardt, Savitzky-Golay."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.signal import savgol_filter
from scipy.spatial import cKDTree

from .geometry import BodyIncrement, Pose2, between, wrap_angles

log = logging.getLogger(__name__)

ORIGIN_SIGMA = 0.01
NONHOLONOMIC_SIGMA = 1.0
ODOMETRY_THETA_SIGMA = 0.05
LOOP_SIGMA_FLOOR = 0.5

LOOP_MAX_CHORD = 50.0
LOOP_MIN_GAP = 30
LOOP_MIN_RATIO = 5.0

KINDS = ("origin_prior", "odometry", "nonholonomic", "fix_prior", "loop_closure")


@dataclass(frozen=True)
class Factor:
    """One graph constraint.

    ``sigma`` is isotropic over every active channel (x/y/theta for priors and
    between factors, lateral only for the non-holonomic factor). Odometry
    factors keep their own heading sigma in ``sigma_theta``.
    """

    kind: str
    nodes: tuple[int, ...]
    measurement: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sigma: float = 1.0
    sigma_theta: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        expected = 1 if self.kind in ("origin_prior", "fix_prior") else 2
        if len(self.nodes) != expected:
            raise ValueError(f"{self.kind} takes {expected} node(s)")
        if not self.sigma > 0.0 or (self.sigma_theta is not None and not self.sigma_theta > 0.0):
            raise ValueError("factor sigmas must be positive")
        if self.kind == "loop_closure" and self.sigma < LOOP_SIGMA_FLOOR:
            raise ValueError("loop-closure sigma below the 0.5 m floor")

    @property
    def sigmas(self) -> tuple[float, float, float]:
        st = self.sigma if self.sigma_theta is None else self.sigma_theta
        return (self.sigma, self.sigma, st)


@dataclass
class FactorGraph:
    initial: list[Pose2]
    factors: list[Factor] = field(default_factory=list)

    def add(self, f: Factor) -> None:
        for idx in f.nodes:
            if not 0 <= idx < len(self.initial):
                raise ValueError(f"factor references missing node {idx}")
        self.factors.append(f)

    def count(self, kind: str) -> int:
        return sum(1 for f in self.factors if f.kind == kind)


@dataclass(frozen=True)
class LoopClosureCandidate:
    i: int
    j: int
    chord: float
    path_length: float


@dataclass(frozen=True)
class FixNode:
    """An accepted fix attached to graph node ``index``."""

    index: int
    pose: Pose2
    sigma_fwd: float
    sigma_lat: float

    @property
    def sigma(self) -> float:
        return 0.5 * (self.sigma_fwd + self.sigma_lat)


def vet_loop_closure(c: LoopClosureCandidate) -> tuple[bool, str | None]:
    """Return ``(accepted, reason)``; reason names the first failed test."""
    if c.chord > LOOP_MAX_CHORD:
        return False, "chord"
    if c.j - c.i < LOOP_MIN_GAP:
        return False, "gap"
    if c.chord == 0.0:
        return (c.path_length > 0.0), (None if c.path_length > 0.0 else "ratio")
    if c.path_length / c.chord < LOOP_MIN_RATIO:
        return False, "ratio"
    return True, None


def loop_sigma(sigma_fwd_i: float, sigma_fwd_j: float) -> float:
    if not (sigma_fwd_i > 0.0 and sigma_fwd_j > 0.0):
        raise ValueError("per-fix sigmas must be positive")
    return max(math.hypot(sigma_fwd_i, sigma_fwd_j), LOOP_SIGMA_FLOOR)


def loop_candidates(fixes: Sequence[FixNode], odometry: Sequence[BodyIncrement]) -> list[LoopClosureCandidate]:
    """All fix pairs within the chord prune, with their travelled path length."""
    if len(fixes) < 2:
        return []
    steps = np.array([inc.norm for inc in odometry])
    cum = np.concatenate([[0.0], np.cumsum(steps)])
    xy = np.array([f.pose.xy for f in fixes])
    pairs = sorted(cKDTree(xy).query_pairs(LOOP_MAX_CHORD))
    out = []
    for a, b in pairs:
        fa, fb = fixes[a], fixes[b]
        if fa.index > fb.index:
            fa, fb = fb, fa
        if fa.index == fb.index:
            continue
        chord = math.hypot(fb.pose.x - fa.pose.x, fb.pose.y - fa.pose.y)
        out.append(LoopClosureCandidate(fa.index, fb.index, chord, float(cum[fb.index] - cum[fa.index])))
    return out


def build_graph(
    trajectory: Sequence[Pose2],
    odometry: Sequence[BodyIncrement],
    odometry_sigmas: Sequence[float],
    fixes: Sequence[FixNode],
    origin: Pose2,
    *,
    odometry_theta_sigma: float | Sequence[float] = ODOMETRY_THETA_SIGMA,
    loop_closures: bool = True,
) -> FactorGraph:
    """Assemble origin prior, odometry, non-holonomic, fix-prior and loop factors.

    ``odometry_theta_sigma`` is one heading sigma for every odometry factor or
    a per-step sequence.
    """
    n = len(trajectory)
    if n == 0:
        raise ValueError("trajectory is empty")
    if len(odometry) != n - 1 or len(odometry_sigmas) != n - 1:
        raise ValueError(f"need {n - 1} odometry increments and sigmas, got {len(odometry)} and {len(odometry_sigmas)}")
    if np.ndim(odometry_theta_sigma) == 0:
        theta_sigmas = [float(odometry_theta_sigma)] * (n - 1)
    else:
        theta_sigmas = [float(v) for v in odometry_theta_sigma]
        if len(theta_sigmas) != n - 1:
            raise ValueError(f"need {n - 1} odometry heading sigmas, got {len(theta_sigmas)}")
    g = FactorGraph(list(trajectory))
    g.add(Factor("origin_prior", (0,), tuple(origin.as_array()), ORIGIN_SIGMA))
    for k, (inc, s, st) in enumerate(zip(odometry, odometry_sigmas, theta_sigmas)):
        g.add(Factor("odometry", (k, k + 1), tuple(inc.as_array()), float(s), st))
    for k in range(n - 1):
        g.add(Factor("nonholonomic", (k, k + 1), sigma=NONHOLONOMIC_SIGMA))
    for f in fixes:
        g.add(Factor("fix_prior", (f.index,), tuple(f.pose.as_array()), f.sigma))
    if loop_closures:
        by_index = {f.index: f for f in fixes}
        for c in loop_candidates(fixes, odometry):
            ok, _ = vet_loop_closure(c)
            if not ok:
                continue
            fi, fj = by_index[c.i], by_index[c.j]
            meas = between(fi.pose, fj.pose)
            g.add(Factor("loop_closure", (c.i, c.j), tuple(meas.as_array()), loop_sigma(fi.sigma_fwd, fj.sigma_fwd)))
    return g


# --------------------------------------------------------------------------
# residuals and Jacobians, vectorised per factor family


@dataclass
class _Block:
    kind: str
    i: np.ndarray
    j: np.ndarray | None
    meas: np.ndarray
    inv_sigma: np.ndarray  # (m, dim)


def _blocks(g: FactorGraph) -> list[_Block]:
    groups: dict[str, list[Factor]] = {}
    for f in g.factors:
        key = "prior" if f.kind in ("origin_prior", "fix_prior") else ("nonhol" if f.kind == "nonholonomic" else "between")
        groups.setdefault(key, []).append(f)
    out = []
    for key, fs in groups.items():
        i = np.array([f.nodes[0] for f in fs], dtype=int)
        j = None if key == "prior" else np.array([f.nodes[1] for f in fs], dtype=int)
        meas = np.array([f.measurement for f in fs], dtype=float)
        if key == "nonhol":
            inv = np.array([[1.0 / f.sigma] for f in fs])
        else:
            inv = 1.0 / np.array([f.sigmas for f in fs])
        out.append(_Block(key, i, j, meas, inv))
    return out


def prior_residual(x: np.ndarray, meas: np.ndarray) -> np.ndarray:
    """World-frame pose difference with wrapped heading; Jacobian is identity."""
    r = x - meas
    r[..., 2] = wrap_angles(r[..., 2])
    return r


def between_residual(xi: np.ndarray, xj: np.ndarray, meas: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual ``between(meas, between(xi, xj))`` and its Jacobians w.r.t. xi and xj.

    All arrays are (m, 3); Jacobians are (m, 3, 3).
    """
    ci, si = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    dx = xj[:, 0] - xi[:, 0]
    dy = xj[:, 1] - xi[:, 1]
    fwd = ci * dx + si * dy
    lat = -si * dx + ci * dy
    cm, sm = np.cos(meas[:, 2]), np.sin(meas[:, 2])
    ef = fwd - meas[:, 0]
    el = lat - meas[:, 1]
    r = np.empty_like(xi)
    r[:, 0] = cm * ef + sm * el
    r[:, 1] = -sm * ef + cm * el
    r[:, 2] = wrap_angles(xj[:, 2] - xi[:, 2] - meas[:, 2])

    m = len(xi)
    # d(fwd, lat)/d(p_j) = R(theta_i)^T ; d/d(theta_i) = (lat, -fwd)
    a = np.empty((m, 2, 2))
    a[:, 0, 0] = cm * ci - sm * si
    a[:, 0, 1] = cm * si + sm * ci
    a[:, 1, 0] = -sm * ci - cm * si
    a[:, 1, 1] = -sm * si + cm * ci
    dth = np.stack([cm * lat - sm * fwd, -sm * lat - cm * fwd], axis=1)

    ji = np.zeros((m, 3, 3))
    jj = np.zeros((m, 3, 3))
    ji[:, :2, :2] = -a
    ji[:, :2, 2] = dth
    ji[:, 2, 2] = -1.0
    jj[:, :2, :2] = a
    jj[:, 2, 2] = 1.0
    return r, ji, jj


def nonholonomic_residual(xi: np.ndarray, xj: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lateral component of ``between(xi, xj)`` and its (m, 1, 3) Jacobians."""
    ci, si = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    dx = xj[:, 0] - xi[:, 0]
    dy = xj[:, 1] - xi[:, 1]
    fwd = ci * dx + si * dy
    lat = -si * dx + ci * dy
    m = len(xi)
    ji = np.zeros((m, 1, 3))
    jj = np.zeros((m, 1, 3))
    ji[:, 0, 0] = si
    ji[:, 0, 1] = -ci
    ji[:, 0, 2] = -fwd
    jj[:, 0, 0] = -si
    jj[:, 0, 1] = ci
    return lat[:, None], ji, jj


def _linearise(blocks: list[_Block], x: np.ndarray, need_jac: bool = True):
    res = []
    rows, cols, vals = [], [], []
    row0 = 0
    for b in blocks:
        if b.kind == "prior":
            r = prior_residual(x[b.i], b.meas)
            jacs = [(b.i, np.broadcast_to(np.eye(3), (len(b.i), 3, 3)))]
        elif b.kind == "between":
            r, ji, jj = between_residual(x[b.i], x[b.j], b.meas)
            jacs = [(b.i, ji), (b.j, jj)]
        else:
            r, ji, jj = nonholonomic_residual(x[b.i], x[b.j])
            jacs = [(b.i, ji), (b.j, jj)]
        r = r * b.inv_sigma
        m, dim = r.shape
        res.append(r.ravel())
        if need_jac:
            rr = row0 + np.arange(m)[:, None] * dim + np.arange(dim)[None, :]  # (m, dim)
            for nodes, jac in jacs:
                jw = jac * b.inv_sigma[:, :, None]
                cc = 3 * nodes[:, None] + np.arange(3)[None, :]  # (m, 3)
                rows.append(np.broadcast_to(rr[:, :, None], (m, dim, 3)).ravel())
                cols.append(np.broadcast_to(cc[:, None, :], (m, dim, 3)).ravel())
                vals.append(jw.ravel())
        row0 += m * dim
    r = np.concatenate(res) if res else np.zeros(0)
    if not need_jac:
        return r, None
    J = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row0, 3 * len(x)),
    )
    return r, J


def graph_cost(g: FactorGraph, poses: Sequence[Pose2] | np.ndarray | None = None) -> float:
    """Total weighted squared error (sum of squared whitened residuals)."""
    x = _as_array(g.initial if poses is None else poses)
    r, _ = _linearise(_blocks(g), x, need_jac=False)
    return float(r @ r)


def _as_array(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return np.array(poses, dtype=float)
    return np.array([p.as_array() for p in poses], dtype=float)


@dataclass
class LMResult:
    poses: list[Pose2]
    initial_cost: float
    final_cost: float
    iterations: int
    cost_history: list[float]
    converged: bool


def optimize(
    g: FactorGraph,
    *,
    max_iterations: int = 100,
    relative_tolerance: float = 1e-5,
    initial_lambda: float = 1e-4,
) -> LMResult:
    """Levenberg-Marquardt on the whitened least-squares problem.

    Damping multiplies the Hessian diagonal by ``1 + lambda``; lambda shrinks
    tenfold on an accepted step and grows tenfold on a rejected one. Stops
    after ``max_iterations`` linearisations or when an accepted step lowers the
    cost by less than ``relative_tolerance`` of its previous value.
    """
    if not any(f.kind in ("origin_prior", "fix_prior") for f in g.factors):
        raise ValueError("graph has no prior; the system is rank deficient")
    blocks = _blocks(g)
    x = _as_array(g.initial)
    r, J = _linearise(blocks, x)
    cost = float(r @ r)
    initial_cost = cost
    history = [cost]
    lam = initial_lambda
    converged = False
    it = 0
    n = x.size
    while it < max_iterations:
        it += 1
        H = (J.T @ J).tocsc()
        grad = J.T @ r
        diag = H.diagonal()
        if np.any(diag <= 0.0):
            raise ValueError("rank-deficient system: some node is unconstrained")
        step_ok = False
        while lam < 1e12:
            A = H + sp.diags(lam * diag, format="csc")
            try:
                delta = spla.spsolve(A, -grad)
            except RuntimeError:
                delta = np.full(n, np.nan)
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            x_new = x + delta.reshape(-1, 3)
            x_new[:, 2] = wrap_angles(x_new[:, 2])
            r_new, _ = _linearise(blocks, x_new, need_jac=False)
            new_cost = float(r_new @ r_new)
            if new_cost <= cost:
                step_ok = True
                break
            lam *= 10.0
        if not step_ok:
            converged = True
            break
        decrease = cost - new_cost
        x = x_new
        lam = max(lam * 0.1, 1e-12)
        prev = cost
        r, J = _linearise(blocks, x)
        cost = float(r @ r)
        history.append(cost)
        if decrease <= relative_tolerance * prev or cost < 1e-24:
            converged = True
            break
    log.debug("LM finished after %d iterations: %.6g -> %.6g", it, initial_cost, cost)
    poses = [Pose2(*row) for row in x]
    return LMResult(poses, initial_cost, cost, it, history, converged)


def savgol_smooth(xs: Sequence[float] | np.ndarray, window: int = 15, order: int = 3) -> np.ndarray:
    """Savitzky-Golay smoothing with least-squares end fits; short series pass through."""
    if window % 2 == 0:
        raise ValueError("window must be odd")
    if order >= window:
        raise ValueError("order must be smaller than the window")
    a = np.asarray(xs, dtype=float)
    if len(a) < window:
        return a.copy()
    return savgol_filter(a, window, order, mode="interp")


# --------------------------------------------------------------------------
# text dump format


def dump_graph(g: FactorGraph, path: str | Path) -> None:
    """One line per factor (PRIOR / BETWEEN / NONHOL / LOOP) preceded by NODE lines.

    The first PRIOR line is the origin prior. BETWEEN lines carry the odometry
    heading sigma as an optional seventh field; NODE lines hold initial values.
    """
    lines = []
    for p_idx, p in enumerate(g.initial):
        lines.append(f"NODE {p_idx} {p.x!r} {p.y!r} {p.theta!r}")
    for f in g.factors:
        m = " ".join(repr(float(v)) for v in f.measurement)
        if f.kind in ("origin_prior", "fix_prior"):
            lines.append(f"PRIOR {f.nodes[0]} {m} {f.sigma!r}")
        elif f.kind == "odometry":
            lines.append(f"BETWEEN {f.nodes[0]} {f.nodes[1]} {m} {f.sigma!r} {f.sigmas[2]!r}")
        elif f.kind == "nonholonomic":
            lines.append(f"NONHOL {f.nodes[0]} {f.nodes[1]} {f.sigma!r}")
        else:
            lines.append(f"LOOP {f.nodes[0]} {f.nodes[1]} {m} {f.sigma!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_graph(path: str | Path) -> FactorGraph:
    nodes: dict[int, Pose2] = {}
    factors: list[Factor] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        tag, vals = parts[0], parts[1:]
        try:
            if tag == "NODE":
                nodes[int(vals[0])] = Pose2(float(vals[1]), float(vals[2]), float(vals[3]))
            elif tag == "PRIOR":
                seen_prior = any(f.kind == "origin_prior" for f in factors)
                kind = "fix_prior" if seen_prior else "origin_prior"
                factors.append(Factor(kind, (int(vals[0]),), tuple(map(float, vals[1:4])), float(vals[4])))
            elif tag == "BETWEEN":
                st = float(vals[6]) if len(vals) > 6 else None
                factors.append(Factor("odometry", (int(vals[0]), int(vals[1])), tuple(map(float, vals[2:5])), float(vals[5]), st))
            elif tag == "NONHOL":
                factors.append(Factor("nonholonomic", (int(vals[0]), int(vals[1])), sigma=float(vals[2])))
            elif tag == "LOOP":
                factors.append(Factor("loop_closure", (int(vals[0]), int(vals[1])), tuple(map(float, vals[2:5])), float(vals[5])))
            else:
                raise ValueError(f"unknown tag {tag!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if sorted(nodes) != list(range(len(nodes))):
        raise ValueError("node indices must be contiguous from 0")
    g = FactorGraph([nodes[k] for k in range(len(nodes))])
    for f in factors:
        g.add(f)
    return g
