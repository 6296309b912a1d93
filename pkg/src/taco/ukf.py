"""Three-state unscented Kalman filter on (x, y, theta).

Sigma points are handled as deviations from the mean rather than absolute
coordinates. With alpha = 1e-3 the central weight is about -1e6, and summing
absolute coordinates would throw away ~6 digits at kilometre-scale positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BodyIncrement, Pose2, rot, wrap_angle, wrap_angles

N_STATE = 3
INITIAL_SIGMAS = (0.01, 0.01, 0.05)
_JITTERS = (1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class NumericalError(ArithmeticError):
    """Raised when a covariance cannot be factorised or inverted."""


@dataclass(frozen=True)
class SigmaParams:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0

    def __post_init__(self) -> None:
        if not self.alpha > 0.0:
            raise ValueError("alpha must be positive")

    @property
    def lam(self) -> float:
        return self.alpha**2 * (N_STATE + self.kappa) - N_STATE

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance weights for the 2n+1 sigma points."""
        lam = self.lam
        c = N_STATE + lam
        wm = np.full(2 * N_STATE + 1, 0.5 / c)
        wc = wm.copy()
        wm[0] = lam / c
        wc[0] = lam / c + (1.0 - self.alpha**2 + self.beta)
        return wm, wc


@dataclass(frozen=True)
class UkfState:
    mean: Pose2
    cov: np.ndarray

    def __post_init__(self) -> None:
        cov = np.array(self.cov, dtype=float)
        if cov.shape != (3, 3) or not np.all(np.isfinite(cov)):
            raise ValueError("cov must be a finite 3x3 matrix")
        if np.max(np.abs(cov - cov.T)) > 1e-10 * max(1.0, np.max(np.abs(cov))):
            raise ValueError("cov must be symmetric")
        cov = 0.5 * (cov + cov.T)
        cov.flags.writeable = False
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class ProcessNoise:
    sigma_fwd: float
    sigma_lat: float
    sigma_theta: float

    def matrix(self) -> np.ndarray:
        return np.diag([self.sigma_fwd**2, self.sigma_lat**2, self.sigma_theta**2])


@dataclass(frozen=True)
class MeasurementNoise:
    sigma_fwd_w: float
    sigma_lat_w: float

    def __post_init__(self) -> None:
        if not (self.sigma_fwd_w > 0.0 and self.sigma_lat_w > 0.0):
            raise ValueError("measurement sigmas must be positive")

    def isotropic(self) -> MeasurementNoise:
        """Same average sigma on both axes (ablation of the anisotropic model)."""
        m = 0.5 * (self.sigma_fwd_w + self.sigma_lat_w)
        return MeasurementNoise(m, m)

    def covariance(self, theta: float) -> np.ndarray:
        """World-frame 2x2 covariance for a vehicle heading ``theta``."""
        r = rot(theta)
        return r @ np.diag([self.sigma_fwd_w**2, self.sigma_lat_w**2]) @ r.T


def initial_state(origin: Pose2, sigmas: tuple[float, float, float] = INITIAL_SIGMAS) -> UkfState:
    return UkfState(origin, np.diag(np.square(sigmas)))


def process_noise_from_eps(eps_imu: float) -> ProcessNoise:
    if eps_imu < 0.0:
        raise ValueError("eps_imu must be non-negative")
    return ProcessNoise(max(1.0, 2.0 * eps_imu), max(1.5, 0.3 * eps_imu), 0.05)


def measurement_noise_from_weight(w: float) -> MeasurementNoise:
    if not (w > 0.0 and math.isfinite(w)):
        raise ValueError(f"match weight must be positive, got {w!r}")
    return MeasurementNoise(
        min(max(1.5 / w, 0.5), 8.0),
        min(max(3.0 / w, 1.0), 12.0),
    )


def _sqrt_cov(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    # singular but PSD (e.g. a channel with exactly zero variance): any
    # S with S S^T = cov will do, and the eigen square root is exact
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= -1e-12 * max(1.0, float(np.max(np.abs(vals)))):
        return vecs * np.sqrt(np.clip(vals, 0.0, None))
    eye = np.eye(cov.shape[0])
    for jitter in _JITTERS:
        try:
            return np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("covariance is not positive semi-definite")


def sigma_deviations(cov: np.ndarray, params: SigmaParams) -> np.ndarray:
    """(2n+1, n) offsets of the sigma points from the mean; row 0 is zero."""
    scaled = _sqrt_cov(np.asarray(cov)) * math.sqrt(N_STATE + params.lam)
    return np.vstack([np.zeros(N_STATE), scaled.T, -scaled.T])


def _weighted_angle_mean(wm: np.ndarray, d: np.ndarray) -> float:
    # atan2 of weighted (sin, cos), written relative to the central point to
    # avoid cancellation: sum(w cos d) = 1 - sum(w * 2 sin^2(d/2)).
    s = float(wm @ np.sin(d))
    c = 1.0 - float(wm @ (2.0 * np.sin(0.5 * d) ** 2))
    return math.atan2(s, c)


def predict(
    state: UkfState,
    inc: BodyIncrement,
    q: ProcessNoise,
    params: SigmaParams | None = None,
) -> UkfState:
    """Propagate sigma points through the body-frame motion model and add Q.

    Q is diagonal in (forward, lateral, heading) and is rotated into the
    world frame by the propagated mean heading.
    """
    params = params or SigmaParams()
    wm, wc = params.weights()
    dev = sigma_deviations(state.cov, params)
    th0 = state.mean.theta
    dth = dev[:, 2]

    # f(mu + d) - f(mu), using cos(a+b)-cos(a) = -2 sin(a+b/2) sin(b/2)
    half = 0.5 * dth
    sh = np.sin(half)
    dcos = -2.0 * np.sin(th0 + half) * sh
    dsin = 2.0 * np.cos(th0 + half) * sh
    prop = np.empty_like(dev)
    prop[:, 0] = dev[:, 0] + dcos * inc.d_fwd - dsin * inc.d_lat
    prop[:, 1] = dev[:, 1] + dsin * inc.d_fwd + dcos * inc.d_lat
    prop[:, 2] = dth

    centre = _compose_arr(state.mean, inc)
    m = np.empty(3)
    m[:2] = wm @ prop[:, :2]
    m[2] = _weighted_angle_mean(wm, prop[:, 2])
    err = prop - m
    err[:, 2] = wrap_angles(err[:, 2])
    cov = (err * wc[:, None]).T @ err

    mean_theta = wrap_angle(centre[2] + m[2])
    r3 = np.eye(3)
    r3[:2, :2] = rot(mean_theta)
    cov = cov + r3 @ q.matrix() @ r3.T
    cov = 0.5 * (cov + cov.T)
    return UkfState(Pose2(centre[0] + m[0], centre[1] + m[1], mean_theta), cov)


def _compose_arr(p: Pose2, inc: BodyIncrement) -> np.ndarray:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array(
        [
            p.x + c * inc.d_fwd - s * inc.d_lat,
            p.y + s * inc.d_fwd + c * inc.d_lat,
            p.theta + inc.d_theta,
        ]
    )


def update_position(
    state: UkfState,
    z: tuple[float, float],
    r: MeasurementNoise,
    theta_meas: float,
    params: SigmaParams | None = None,
    *,
    r_cov: np.ndarray | None = None,
) -> UkfState:
    """Unscented update with a position-only measurement ``z = (x, y)``.

    ``theta_meas`` orients the body-frame measurement noise; pass ``r_cov``
    to supply a world-frame 2x2 covariance directly instead.
    """
    params = params or SigmaParams()
    wm, wc = params.weights()
    dev = sigma_deviations(state.cov, params)

    zdev = dev[:, :2]
    zm = wm @ zdev
    ez = zdev - zm
    ex = dev.copy()
    ex[:, 2] = wrap_angles(ex[:, 2])

    R = MeasurementNoise.covariance(r, theta_meas) if r_cov is None else np.asarray(r_cov, dtype=float)
    S = (ez * wc[:, None]).T @ ez + R
    pxz = (ex * wc[:, None]).T @ ez
    try:
        cho = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is singular") from exc
    # K = Pxz S^-1 via two triangular solves
    k = np.linalg.solve(cho.T, np.linalg.solve(cho, pxz.T)).T

    mu = state.mean
    innov = np.array([z[0] - (mu.x + zm[0]), z[1] - (mu.y + zm[1])])
    dx = k @ innov
    cov = state.cov - k @ S @ k.T
    cov = 0.5 * (cov + cov.T)
    return UkfState(Pose2(mu.x + dx[0], mu.y + dx[1], mu.theta + dx[2]), cov)
