"""2x2 SPD / ellipse geometry and temporally weighted blob statistics.

Everything here is fixed to two dimensions and written with closed forms so
that the tracker's hot path never calls an iterative eigen-solver.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SIGMA_MIN = 0.5          # px, covariance floor for degenerate measurements
DEFAULT_BETA = 500.0     # 1/s, temporal decay of event weights
HALF_PI = 0.5 * math.pi
TWO_PI = 2.0 * math.pi


class Ellipse(NamedTuple):
    """Semi-axes ``lambda1 >= lambda2 > 0`` (px) and orientation in [-pi/2, pi/2)."""

    lambda1: float
    lambda2: float
    theta: float


class Spd2(NamedTuple):
    """Symmetric 2x2 matrix ``[[a, b], [b, c]]``."""

    a: float
    b: float
    c: float

    def as_array(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.b, self.c]])

    @classmethod
    def from_array(cls, m) -> "Spd2":
        m = np.asarray(m, dtype=float)
        return cls(float(m[0, 0]), 0.5 * float(m[0, 1] + m[1, 0]), float(m[1, 1]))

    @property
    def det(self) -> float:
        return self.a * self.c - self.b * self.b


def check_spd(s: Spd2) -> None:
    if not all(math.isfinite(v) for v in s):
        raise ValueError(f"matrix has non-finite entries: {tuple(s)}")
    if s.a <= 0:
        raise ValueError(f"not positive definite: a = {s.a} <= 0")
    if s.c <= 0:
        raise ValueError(f"not positive definite: c = {s.c} <= 0")
    if s.det <= 0:
        raise ValueError(f"not positive definite: det = a*c - b^2 = {s.det} <= 0")


def canonical_orientation(theta: float) -> float:
    """Map an ellipse orientation into [-pi/2, pi/2)."""
    t = (theta + HALF_PI) % math.pi - HALF_PI
    if t >= HALF_PI:
        t -= math.pi
    return t


def cov_from_ellipse(e: Ellipse) -> Spd2:
    c, s = math.cos(e.theta), math.sin(e.theta)
    l1, l2 = e.lambda1 * e.lambda1, e.lambda2 * e.lambda2
    return Spd2(l1 * c * c + l2 * s * s, (l1 - l2) * c * s, l1 * s * s + l2 * c * c)


def _eig_sym2(a: float, b: float, c: float) -> tuple[float, float, float]:
    half_tr = 0.5 * (a + c)
    half_diff = 0.5 * (a - c)
    disc = math.hypot(half_diff, b)
    theta = 0.0 if disc == 0.0 else 0.5 * math.atan2(2.0 * b, a - c)
    return half_tr + disc, half_tr - disc, theta


def ellipse_from_cov(s: Spd2) -> Ellipse:
    """Closed-form eigen-decomposition; circles get ``theta = 0``."""
    check_spd(s)
    e1, e2, theta = _eig_sym2(s.a, s.b, s.c)
    # tiny negative e2 from rounding on nearly singular input
    return Ellipse(math.sqrt(e1), math.sqrt(max(e2, 0.0)), canonical_orientation(theta))


def _inv_sqrt(s: Spd2) -> np.ndarray:
    e1, e2, theta = _eig_sym2(*s)
    c, sn = math.cos(theta), math.sin(theta)
    r = np.array([[c, -sn], [sn, c]])
    return r @ np.diag([1.0 / math.sqrt(e1), 1.0 / math.sqrt(e2)]) @ r.T


def affine_distance(s1: Spd2, s2: Spd2) -> float:
    """Geodesic distance ``||log(s1^-1/2 s2 s1^-1/2)||_F`` under the affine-invariant metric."""
    check_spd(s1)
    check_spd(s2)
    w = _inv_sqrt(s1)
    m = w @ s2.as_array() @ w
    e1, e2, _ = _eig_sym2(m[0, 0], 0.5 * (m[0, 1] + m[1, 0]), m[1, 1])
    return math.hypot(math.log(e1), math.log(e2))


def product_coords(e: Ellipse) -> tuple[float, float, float]:
    return math.log(e.lambda1), math.log(e.lambda2), e.theta


def ellipse_from_product(mu1: float, mu2: float, theta: float) -> Ellipse:
    return Ellipse(math.exp(mu1), math.exp(mu2), theta)


def cov_from_product(mu1: float, mu2: float, theta: float) -> Spd2:
    """SPD matrix for log-axis coordinates, without reordering the axes."""
    return cov_from_ellipse(Ellipse(math.exp(mu1), math.exp(mu2), theta))


def coupled_metric_weights(e: Ellipse) -> tuple[float, float, float]:
    """Coefficients of (dmu1^2, dmu2^2, dtheta^2) in the affine-invariant line element."""
    ecc = (e.lambda1 ** 2 - e.lambda2 ** 2) / (e.lambda1 * e.lambda2)
    return 4.0, 4.0, 2.0 * ecc * ecc


def product_distance(e1: Ellipse, e2: Ellipse, weights=(1.0, 1.0, 1.0)) -> float:
    """Distance on R x R x S^1 with optional constant per-factor weights."""
    d1 = math.log(e2.lambda1) - math.log(e1.lambda1)
    d2 = math.log(e2.lambda2) - math.log(e1.lambda2)
    dt = angle_diff_pi_periodic(e2.theta, e1.theta)
    return math.sqrt(weights[0] * d1 * d1 + weights[1] * d2 * d2 + weights[2] * dt * dt)


def wrap_angle(theta: float) -> float:
    """Wrap to [-pi, pi)."""
    if not math.isfinite(theta):
        raise ValueError(f"cannot wrap non-finite angle {theta}")
    t = (theta + math.pi) % TWO_PI - math.pi
    if t >= math.pi:
        t -= TWO_PI
    return t


def angle_diff_pi_periodic(a: float, b: float) -> float:
    """Smallest ``d`` in [-pi/2, pi/2) with ``a = b + d (mod pi)``."""
    d = (a - b + HALF_PI) % math.pi - HALF_PI
    if d >= HALF_PI:
        d -= math.pi
    return d


# ---------------------------------------------------------------------------
# temporally weighted blob statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightedStats:
    mean: np.ndarray        # (2,) px
    cov: Spd2               # px^2, floored
    weight_sum: float       # sum of unnormalized weights
    count: int
    mean_t: float           # weighted mean timestamp, us


def floor_cov(cov: Spd2, sigma_min: float = SIGMA_MIN) -> Spd2:
    floor = sigma_min * sigma_min
    _, e2, _ = _eig_sym2(*cov)
    if e2 < floor:
        return Spd2(cov.a + floor, cov.b, cov.c + floor)
    return cov


def weighted_blob_stats(events: np.ndarray, t_k: float, beta: float = DEFAULT_BETA,
                        sigma_min: float = SIGMA_MIN) -> WeightedStats:
    """Weighted mean and covariance of event positions with ``w_j = exp(-beta (t_k - t_j))``.

    Weights are normalized to sum to one. ``beta`` is per second, timestamps
    are microseconds.
    """
    n = int(events.size)
    if n == 0:
        raise ValueError("weighted_blob_stats needs at least one event")
    t = events["t"].astype(float)
    if t.max() > t_k:
        raise ValueError(f"t_k={t_k} precedes the newest event at {t.max()}")
    w = np.exp(-beta * 1e-6 * (t_k - t))
    wsum = float(w.sum())
    if wsum <= 0.0:
        # every weight underflowed; fall back to the newest-relative weights
        w = np.exp(-beta * 1e-6 * (t.max() - t))
        wsum = float(w.sum())
    wn = w / wsum
    # offsets from the first event keep the sums small and make a
    # single-pixel blob land exactly on that pixel
    x0, y0 = float(events["x"][0]), float(events["y"][0])
    xs = events["x"] - x0
    ys = events["y"] - y0
    ox = float(wn @ xs)
    oy = float(wn @ ys)
    mx, my = x0 + ox, y0 + oy
    dx = xs - ox
    dy = ys - oy
    cov = Spd2(float(wn @ (dx * dx)), float(wn @ (dx * dy)), float(wn @ (dy * dy)))
    return WeightedStats(np.array([mx, my]), floor_cov(cov, sigma_min), wsum, n, float(wn @ t))


class StreamingBlobStats:
    """Single-pass weighted mean/covariance (West's update) with exponential weights.

    Normalized weights do not depend on ``t_k``, so events can be folded in as
    they arrive; the accumulator is rescaled whenever the exponent grows large.
    """

    _RESCALE = 50.0

    def __init__(self, beta: float = DEFAULT_BETA, sigma_min: float = SIGMA_MIN):
        self.beta = beta * 1e-6
        self.sigma_min = sigma_min
        self.count = 0
        self._t_ref = 0.0
        self._w = 0.0
        self._mx = self._my = self._mt = 0.0
        self._sxx = self._sxy = self._syy = 0.0
        self._t_last = -math.inf

    def add(self, t: float, x: float, y: float) -> None:
        if t < self._t_last:
            raise ValueError("events must be added in time order")
        self._t_last = t
        if self.count == 0:
            self._t_ref = t
        expo = self.beta * (t - self._t_ref)
        if expo > self._RESCALE:
            scale = math.exp(-expo)
            self._w *= scale
            self._sxx *= scale
            self._sxy *= scale
            self._syy *= scale
            self._t_ref = t
            expo = 0.0
        w = math.exp(expo)
        self.count += 1
        self._w += w
        r = w / self._w
        dx = x - self._mx
        dy = y - self._my
        self._mx += r * dx
        self._my += r * dy
        self._mt += r * (t - self._mt)
        self._sxx += w * dx * (x - self._mx)
        self._sxy += w * dx * (y - self._my)
        self._syy += w * dy * (y - self._my)

    def extend(self, events: np.ndarray) -> None:
        for t, x, y in zip(events["t"].tolist(), events["x"].tolist(), events["y"].tolist()):
            self.add(t, x, y)

    def result(self, t_k: float) -> WeightedStats:
        if self.count == 0:
            raise ValueError("no events accumulated")
        cov = Spd2(self._sxx / self._w, self._sxy / self._w, self._syy / self._w)
        wsum = self._w * math.exp(-self.beta * (t_k - self._t_ref))
        return WeightedStats(np.array([self._mx, self._my]), floor_cov(cov, self.sigma_min),
                             wsum, self.count, self._mt)
