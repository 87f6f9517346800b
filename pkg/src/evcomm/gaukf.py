"""Geometry-aware unscented Kalman filter for an elliptical event blob.

State (tangent coordinates)::

    [x, y, vx, vy, mu1, mu2, theta, omega]

with ``mu_i = log(lambda_i)`` so the semi-axes are positive by construction,
and ``theta`` living on the circle. Sigma points are averaged circularly in
``theta`` and all residuals are formed in the tangent space, so the filter is
an ordinary UKF on R^7 x S^1.

The measurement ``[x, y, lambda1, lambda2, theta]`` is the temporally
weighted centroid and covariance of one packet. Because the centroid of a
moving blob sits at the weighted mean event time, not at the packet end, the
position rows of the measurement function are ``x - vx * lag``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import geometry as geo
from .events import EventPacket

N_STATE = 8
N_MEAS = 5
FIELDS = ("x", "y", "vx", "vy", "mu1", "mu2", "theta", "omega")
IX, IY, IVX, IVY, IMU1, IMU2, ITH, IOM = range(N_STATE)


class BlobState(NamedTuple):
    x: float
    y: float
    vx: float
    vy: float
    mu1: float
    mu2: float
    theta: float
    omega: float

    @property
    def lambda1(self) -> float:
        return math.exp(self.mu1)

    @property
    def lambda2(self) -> float:
        return math.exp(self.mu2)

    @property
    def ellipse(self) -> geo.Ellipse:
        return geo.Ellipse(self.lambda1, self.lambda2, self.theta)


class Measurement(NamedTuple):
    x: float
    y: float
    lambda1: float
    lambda2: float
    theta: float
    mean_t: float = math.nan   # weighted mean event time (us); nan = at t_k
    count: int = 0


@dataclass(frozen=True)
class UkfParams:
    alpha: float = 0.5
    beta_ukf: float = 2.0
    kappa: float = 0.0
    # process noise spectral densities, per second
    q_diag: tuple = (1.0, 1.0, 1e7, 1e7, 10.0, 10.0, 0.05, 1.0)
    # measurement noise for (x, y, log l1, log l2, theta)
    r_diag: tuple = (1.0, 1.0, 0.02, 0.02, 0.05)
    beta_decay: float = geo.DEFAULT_BETA
    n_min: int = 4
    minor_clamp: float = 0.2
    sigma_min: float = geo.SIGMA_MIN
    init_cov_diag: tuple = (25.0, 25.0, 1e6, 1e6, 0.25, 0.25, 1.0, 10.0)
    # scale the orientation noise by the eccentricity weight of the affine metric
    eccentricity_aware: bool = True
    time_compensation: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if len(self.q_diag) != N_STATE or min(self.q_diag) <= 0:
            raise ValueError("q_diag needs 8 positive entries")
        if len(self.r_diag) != N_MEAS or min(self.r_diag) <= 0:
            raise ValueError("r_diag needs 5 positive entries")
        if len(self.init_cov_diag) != N_STATE or min(self.init_cov_diag) <= 0:
            raise ValueError("init_cov_diag needs 8 positive entries")
        if self.n_min < 3:
            raise ValueError("n_min below 3 cannot give a full-rank covariance")


@lru_cache(maxsize=16)
def _weights(alpha: float, beta: float, kappa: float):
    n = N_STATE
    lam = alpha * alpha * (n + kappa) - n
    c = n + lam
    wm = np.full(2 * n + 1, 0.5 / c)
    wc = wm.copy()
    wm[0] = lam / c
    wc[0] = lam / c + (1.0 - alpha * alpha + beta)
    return c, wm, wc


@dataclass(frozen=True)
class FilterBelief:
    vec: np.ndarray                      # (8,) tangent-coordinate mean
    cov: np.ndarray                      # (8, 8)
    t: int                               # us
    history: tuple = ()                  # last two posterior mu2 values
    increment_pending: bool = True       # minor-axis increment not yet applied
    last_step_us: float = 0.0
    updated: bool = False                # last step fused a measurement
    n_updates: int = 0

    @property
    def mean(self) -> BlobState:
        return BlobState(*map(float, self.vec))

    @property
    def ellipse(self) -> geo.Ellipse:
        return geo.Ellipse(math.exp(self.vec[IMU1]), math.exp(self.vec[IMU2]), float(self.vec[ITH]))

    @property
    def position(self) -> np.ndarray:
        return self.vec[:2].copy()


def _wrap(a):
    return (a + math.pi) % geo.TWO_PI - math.pi


def _diff_pi(a, b):
    return (a - b + geo.HALF_PI) % math.pi - geo.HALF_PI


def _check_finite(vec: np.ndarray, what: str) -> None:
    if not math.isfinite(float(vec.sum())):
        bad = [FIELDS[i] for i in np.flatnonzero(~np.isfinite(vec))]
        raise ValueError(f"non-finite {what} in field(s): {', '.join(bad)}")


def _sigma_points(vec: np.ndarray, cov: np.ndarray, c: float) -> np.ndarray:
    try:
        s = np.linalg.cholesky(c * cov)
    except np.linalg.LinAlgError:
        # PSD but singular within rounding
        w, v = np.linalg.eigh(c * cov)
        s = v * np.sqrt(np.clip(w, 0.0, None))
    pts = np.empty((2 * N_STATE + 1, N_STATE))
    pts[0] = vec
    pts[1:N_STATE + 1] = vec + s.T
    pts[N_STATE + 1:] = vec - s.T
    pts[:, ITH] = _wrap(pts[:, ITH])
    return pts


@lru_cache(maxsize=16)
def _diag(values: tuple) -> np.ndarray:
    m = np.diag(np.asarray(values, dtype=float))
    m.flags.writeable = False
    return m


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def minor_axis_increment(belief: FilterBelief, params: UkfParams = UkfParams()) -> float:
    """Log-ratio of the last two posterior minor axes, clamped per step."""
    if len(belief.history) < 2:
        return 0.0
    d = belief.history[-1] - belief.history[-2]
    return float(min(max(d, -params.minor_clamp), params.minor_clamp))


def initial_belief(z: Measurement, t: int, params: UkfParams = UkfParams()) -> FilterBelief:
    vec = np.array([z.x, z.y, 0.0, 0.0, math.log(z.lambda1), math.log(z.lambda2),
                    geo.canonical_orientation(z.theta), 0.0])
    _check_finite(vec, "initial state")
    return FilterBelief(vec, np.diag(params.init_cov_diag).astype(float), int(t),
                        history=(float(vec[IMU2]),), increment_pending=False)


def predict(belief: FilterBelief, dt: float, params: UkfParams = UkfParams()) -> FilterBelief:
    """Propagate sigma points through the constant-velocity / log-axis / S^1 process model."""
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    _check_finite(belief.vec, "state")
    c, wm, wc = _weights(params.alpha, params.beta_ukf, params.kappa)
    d_minor = minor_axis_increment(belief, params) if belief.increment_pending else 0.0

    pts = _sigma_points(belief.vec, belief.cov, c)
    pts[:, IX] += pts[:, IVX] * dt
    pts[:, IY] += pts[:, IVY] * dt
    pts[:, IMU1] += d_minor
    pts[:, IMU2] += d_minor
    th = pts[:, ITH] + pts[:, IOM] * dt
    pts[:, ITH] = np.arctan2(np.sin(th), np.cos(th))

    vec = wm @ pts
    vec[ITH] = math.atan2(wm @ np.sin(pts[:, ITH]), wm @ np.cos(pts[:, ITH]))
    res = pts - vec
    res[:, ITH] = _wrap(res[:, ITH])
    cov = res.T @ (wc[:, None] * res) + _diag(params.q_diag) * dt
    cov = _symmetrize(cov)
    _check_finite(vec, "predicted state")
    return replace(belief, vec=vec, cov=cov, t=belief.t + int(round(dt * 1e6)),
                   increment_pending=False, updated=False)


def make_measurement(events, t_k: float, params: UkfParams = UkfParams()) -> Optional[Measurement]:
    """Blob measurement from the weighted packet statistics, or None if too few events."""
    if isinstance(events, EventPacket):
        events = events.events
    if events.size < params.n_min:
        return None
    st = geo.weighted_blob_stats(events, t_k, params.beta_decay, params.sigma_min)
    e = geo.ellipse_from_cov(st.cov)
    return Measurement(float(st.mean[0]), float(st.mean[1]), e.lambda1, e.lambda2, e.theta,
                       st.mean_t, st.count)


def _measurement_noise(z: Measurement, params: UkfParams) -> np.ndarray:
    r = np.array(params.r_diag, dtype=float)
    if params.eccentricity_aware:
        # orientation carries weight 2*ecc^2 against 4 for each log-axis in
        # the affine-invariant line element; round blobs say little about theta
        _, _, w_theta = geo.coupled_metric_weights(geo.Ellipse(z.lambda1, z.lambda2, z.theta))
        r[4] *= min(4.0 / max(w_theta, 1e-12), 1e6) if w_theta < 4.0 else 1.0
    return np.diag(r)


def update(belief: FilterBelief, z: Measurement, params: UkfParams = UkfParams()) -> FilterBelief:
    """Unscented measurement update carried out entirely in tangent coordinates."""
    if not (z.lambda1 > 0 and z.lambda2 > 0):
        raise ValueError(f"measurement axes must be positive, got {z.lambda1}, {z.lambda2}")
    zv = np.array([z.x, z.y, math.log(z.lambda1), math.log(z.lambda2), z.theta])
    if not np.all(np.isfinite(zv)):
        raise ValueError(f"non-finite measurement {tuple(z)}")
    c, wm, wc = _weights(params.alpha, params.beta_ukf, params.kappa)
    lag = 0.0
    if params.time_compensation and math.isfinite(z.mean_t):
        lag = max(belief.t - z.mean_t, 0.0) * 1e-6

    pts = _sigma_points(belief.vec, belief.cov, c)
    zs = np.empty((2 * N_STATE + 1, N_MEAS))
    zs[:, 0] = pts[:, IX] - pts[:, IVX] * lag
    zs[:, 1] = pts[:, IY] - pts[:, IVY] * lag
    zs[:, 2] = pts[:, IMU1]
    zs[:, 3] = pts[:, IMU2]
    zs[:, 4] = pts[:, ITH]

    zhat = wm @ zs
    zhat[4] = math.atan2(wm @ np.sin(zs[:, 4]), wm @ np.cos(zs[:, 4]))
    zres = zs - zhat
    zres[:, 4] = _diff_pi(zs[:, 4], zhat[4])
    xres = pts - belief.vec
    xres[:, ITH] = _wrap(xres[:, ITH])

    s = zres.T @ (wc[:, None] * zres) + _measurement_noise(z, params)
    cross = xres.T @ (wc[:, None] * zres)
    try:
        gain = np.linalg.solve(s, cross.T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("innovation covariance is singular; check Q and R") from exc
    innov = zv - zhat
    innov[4] = geo.angle_diff_pi_periodic(zv[4], zhat[4])

    vec = belief.vec + gain @ innov
    vec[ITH] = geo.wrap_angle(float(vec[ITH]))
    cov = _symmetrize(belief.cov - gain @ s @ gain.T)
    _check_finite(vec, "posterior state")
    vec, cov = _canonicalize(vec, cov)
    hist = (belief.history + (float(vec[IMU2]),))[-2:]
    return replace(belief, vec=vec, cov=cov, history=hist, increment_pending=True,
                   updated=True, n_updates=belief.n_updates + 1)


_SWAP = np.arange(N_STATE)
_SWAP[[IMU1, IMU2]] = [IMU2, IMU1]


def _canonicalize(vec: np.ndarray, cov: np.ndarray):
    if vec[IMU1] >= vec[IMU2]:
        return vec, cov
    vec = vec[_SWAP]
    vec[ITH] = geo.wrap_angle(float(vec[ITH]) + geo.HALF_PI)
    return vec, cov[np.ix_(_SWAP, _SWAP)]


def step(belief: FilterBelief, packet: EventPacket, params: UkfParams = UkfParams(),
         gate: Optional[Callable[[FilterBelief, EventPacket], EventPacket]] = None) -> FilterBelief:
    """Predict to the end of ``packet`` and fuse its measurement when there is one.

    ``gate`` optionally restricts the packet using the predicted belief (the
    pipeline passes its region-of-interest gate here).
    """
    if packet.t_start < belief.t:
        raise ValueError(f"packet starts at {packet.t_start} before belief time {belief.t}")
    t0 = time.perf_counter()
    dt = (packet.t_end - belief.t) * 1e-6
    prior = predict(belief, dt, params) if dt > 0 else belief
    if gate is not None:
        packet = gate(prior, packet)
    z = make_measurement(packet.events, packet.t_end, params)
    post = update(prior, z, params) if z is not None else prior
    return replace(post, last_step_us=(time.perf_counter() - t0) * 1e6)


def reported_lambdas(belief: FilterBelief) -> tuple[float, float]:
    return math.exp(belief.vec[IMU1]), math.exp(belief.vec[IMU2])
