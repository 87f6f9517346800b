"""Per-event extended Kalman filter used as the comparison baseline.

This is a stand-in for the cited asynchronous blob tracker, not a
reproduction of it: every event triggers one predict and one update, and all
shape quantities are handled in flat Euclidean coordinates.

State order::

    [x, y, vx, vy, theta, q, lambda1, lambda2]

Per event:

1. constant-velocity predict, ``theta += q * dt`` without wrapping;
2. position update with the event as a 2-D measurement whose noise is the
   current blob shape matrix;
3. shape update by innovation-covariance matching: an exponentially
   forgetting covariance ``S`` of position innovations, minus the predicted
   position covariance, estimates the blob covariance. The axes are pulled
   toward its first-order projection on the current axes and ``theta`` toward
   its eigenvector angle with a plain (unwrapped) difference.

Semi-axes that end up non-positive are clamped to ``LAMBDA_CLAMP`` and
counted in ``clamped``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import geometry as geo
from .events import EventPacket

LAMBDA_CLAMP = 0.1
IX, IY, IVX, IVY, ITH, IQ, IL1, IL2 = range(8)
FIELDS = ("x", "y", "vx", "vy", "theta", "q", "lambda1", "lambda2")
_SHAPE = np.array([ITH, IL1, IL2])


@dataclass(frozen=True)
class EkfParams:
    q_diag: tuple = (1.0, 1.0, 400.0, 400.0, 0.05, 1.0, 1.0, 1.0)
    r_shape: tuple = (0.05, 1.0, 1.0)      # theta rad^2, lambda px^2
    forgetting: float = 0.99
    pixel_var: float = 1.0 / 12.0          # quantization of event coordinates
    init_cov_diag: tuple = (25.0, 25.0, 1e6, 1e6, 1.0, 10.0, 4.0, 4.0)


@dataclass(frozen=True)
class EkfState:
    vec: np.ndarray        # (8,) in FIELDS order
    cov: np.ndarray        # (8, 8)
    shape_cov: tuple       # forgetting innovation covariance (a, b, c)
    t: int                 # us
    clamped: int = 0
    last_packet_us: float = 0.0

    @property
    def x(self) -> float:
        return float(self.vec[IX])

    @property
    def y(self) -> float:
        return float(self.vec[IY])

    @property
    def theta(self) -> float:
        return float(self.vec[ITH])

    @property
    def lambda1(self) -> float:
        return float(self.vec[IL1])

    @property
    def lambda2(self) -> float:
        return float(self.vec[IL2])

    @property
    def position(self) -> np.ndarray:
        return self.vec[:2].copy()


def initial_state(x: float, y: float, lambda1: float, lambda2: float, theta: float, t: int,
                  params: EkfParams = EkfParams()) -> EkfState:
    vec = np.array([x, y, 0.0, 0.0, theta, 0.0, lambda1, lambda2], dtype=float)
    shape = geo.cov_from_ellipse(geo.Ellipse(lambda1, lambda2, theta))
    return EkfState(vec, np.diag(params.init_cov_diag).astype(float), tuple(shape), int(t))


class _Kernel:
    """Mutable working copy of an EkfState for folding many events."""

    __slots__ = ("v", "P", "sa", "sb", "sc", "t", "clamped", "p", "q", "r_shape")

    def __init__(self, s: EkfState, params: EkfParams):
        self.v = s.vec.copy()
        self.P = s.cov.copy()
        self.sa, self.sb, self.sc = s.shape_cov
        self.t = s.t
        self.clamped = s.clamped
        self.p = params
        self.q = np.asarray(params.q_diag, dtype=float)
        self.r_shape = np.diag(params.r_shape)

    def freeze(self, last_packet_us: float = 0.0) -> EkfState:
        return EkfState(self.v, self.P, (self.sa, self.sb, self.sc), int(self.t),
                        self.clamped, last_packet_us)

    def predict(self, t: int) -> None:
        dt = (t - self.t) * 1e-6
        if dt < 0:
            raise ValueError(f"event at {t} precedes filter time {self.t}")
        self.t = t
        if dt == 0.0:
            return
        v, P = self.v, self.P
        v[IX] += v[IVX] * dt
        v[IY] += v[IVY] * dt
        v[ITH] += v[IQ] * dt
        # P <- F P F^T for the sparse constant-velocity Jacobian
        P[IX] += dt * P[IVX]
        P[IY] += dt * P[IVY]
        P[ITH] += dt * P[IQ]
        P[:, IX] += dt * P[:, IVX]
        P[:, IY] += dt * P[:, IVY]
        P[:, ITH] += dt * P[:, IQ]
        P.flat[::9] += self.q * dt

    def event(self, t: int, ex: float, ey: float) -> None:
        self.predict(t)
        v, P, prm = self.v, self.P, self.p
        l1, l2, th = abs(v[IL1]), abs(v[IL2]), v[ITH]
        c, s = math.cos(th), math.sin(th)
        # position update, measurement noise = blob shape matrix
        ra = l1 * l1 * c * c + l2 * l2 * s * s + prm.pixel_var
        rb = (l1 * l1 - l2 * l2) * c * s
        rc = l1 * l1 * s * s + l2 * l2 * c * c + prm.pixel_var
        pa, pb, pc = P[0, 0], P[0, 1], P[1, 1]
        sa, sb, sc = pa + ra, pb + rb, pc + rc
        det = sa * sc - sb * sb
        if not det > 0.0 or not math.isfinite(det):
            raise ValueError("position innovation covariance is not positive definite")
        nx, ny = ex - v[IX], ey - v[IY]
        K = P[:, :2] @ np.array([[sc, -sb], [-sb, sa]]) / det
        v += K @ np.array([nx, ny])
        P -= K @ P[:2, :]

        # shape from innovation-covariance matching
        f = prm.forgetting
        g = 1.0 - f
        self.sa = f * self.sa + g * nx * nx
        self.sb = f * self.sb + g * nx * ny
        self.sc = f * self.sc + g * ny * ny
        ha, hb, hc = self.sa - pa, self.sb - pb, self.sc - pc
        _, _, th_m = geo._eig_sym2(ha, hb, hc)
        th_m = geo.canonical_orientation(th_m)
        l1s, l2s = v[IL1], v[IL2]
        if l1s == 0.0 or l2s == 0.0:
            raise ValueError("semi-axis reached exactly zero")
        proj1 = ha * c * c + 2 * hb * c * s + hc * s * s
        proj2 = ha * s * s - 2 * hb * c * s + hc * c * c
        z = np.array([th_m - th,
                      (proj1 - l1s * l1s) / (2.0 * l1s),
                      (proj2 - l2s * l2s) / (2.0 * l2s)])
        Ps = P[np.ix_(_SHAPE, _SHAPE)] + self.r_shape
        Ks = np.linalg.solve(Ps, P[_SHAPE, :]).T
        v += Ks @ z
        P -= Ks @ P[_SHAPE, :]
        P[:] = 0.5 * (P + P.T)
        for i in (IL1, IL2):
            if not v[i] > 0.0:
                v[i] = LAMBDA_CLAMP
                self.clamped += 1
        if not math.isfinite(float(v.sum())):
            bad = [FIELDS[i] for i in np.flatnonzero(~np.isfinite(v))]
            raise ValueError(f"non-finite EKF state in field(s): {', '.join(bad)}")


def ekf_process_event(state: EkfState, e, params: EkfParams = EkfParams()) -> EkfState:
    """One predict + update for a single event ``(t, x, y, p)``."""
    k = _Kernel(state, params)
    k.event(int(e[0]), float(e[1]), float(e[2]))
    return k.freeze(state.last_packet_us)


def ekf_step(state: EkfState, packet: EventPacket, params: EkfParams = EkfParams()) -> EkfState:
    """Fold every event of the packet in order, then predict to the packet end."""
    t0 = time.perf_counter()
    k = _Kernel(state, params)
    ev = packet.events
    for t, x, y in zip(ev["t"].tolist(), ev["x"].tolist(), ev["y"].tolist()):
        k.event(t, float(x), float(y))
    if packet.t_end > k.t:
        k.predict(packet.t_end)
    return k.freeze((time.perf_counter() - t0) * 1e6)


def ellipse_of(state: EkfState) -> geo.Ellipse:
    return geo.Ellipse(abs(state.lambda1), abs(state.lambda2), state.theta)
