"""Synthetic event streams: a modulated LED moving on the sensor plane.

Three sources are rendered and merged:

* edge bursts, ``Poisson(events_per_edge)`` events at every LED on/off edge,
  drawn from the LED's Gaussian blob at the true position, polarity +1 for
  OFF->ON and -1 for ON->OFF, each delayed by an exponential latency;
* motion events while the LED is lit, ``motion_event_rate`` per pixel of
  travel, mixed polarity, drawn from the blob stretched along the velocity by
  ``speed * motion_sweep_s``;
* background noise, uniform over the sensor and in time.

Draw order from the single PCG64 generator is fixed: edge counts, edge
latencies, edge offsets; motion count, motion times, motion acceptance,
motion offsets, motion polarities; noise count, noise times, noise x, noise y,
noise polarities.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .events import empty_events, make_events
from .modem import OFF, ON, OnOffSchedule

SENSOR_WIDTH = 1280
SENSOR_HEIGHT = 720
TRUTH_RATE_HZ = 1000.0
KINDS = ("stationary", "linear", "circular", "waypoints")


@dataclass(frozen=True)
class Trajectory:
    """Image-plane path of the transmitter, valid on ``[0, duration_s]``."""

    kind: str = "stationary"
    start: tuple = (640.0, 360.0)
    velocity: tuple = (0.0, 0.0)           # px/s, linear
    center: tuple = (640.0, 360.0)         # circular
    diameter: float = 610.0
    angular_rate: float = 0.0              # rad/s, circular
    phase: float = 0.0                     # rad, circular start angle
    waypoints: tuple = ()                  # ((t_s, x, y), ...) piecewise linear
    duration_s: float = 10.0
    width: int = SENSOR_WIDTH
    height: int = SENSOR_HEIGHT

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}; expected one of {KINDS}")
        if not self.duration_s > 0:
            raise ValueError("trajectory duration must be positive")
        if self.kind == "circular" and not self.diameter > 0:
            raise ValueError("circle diameter must be positive")
        if self.kind == "waypoints":
            wp = np.asarray(self.waypoints, dtype=float)
            if wp.ndim != 2 or wp.shape[1] != 3 or len(wp) < 2:
                raise ValueError("waypoints need at least two (t_s, x, y) rows")
            if np.any(np.diff(wp[:, 0]) <= 0):
                raise ValueError("waypoint times must be strictly increasing")
            if wp[0, 0] > 0 or wp[-1, 0] < self.duration_s:
                raise ValueError("waypoints must cover [0, duration_s]")
        t = np.linspace(0.0, self.duration_s, 2001)
        if self.kind == "waypoints":
            t = np.union1d(t, np.clip(np.asarray(self.waypoints)[:, 0], 0.0, self.duration_s))
        x, y = self._position(t)
        if x.min() < 0 or y.min() < 0 or x.max() > self.width - 1 or y.max() > self.height - 1:
            raise ValueError("trajectory leaves the sensor within its duration")

    @classmethod
    def circular_at_speed(cls, speed: float, diameter: float = 610.0, **kw) -> "Trajectory":
        """Circle whose rim speed is ``speed`` px/s."""
        return cls(kind="circular", diameter=diameter, angular_rate=2.0 * speed / diameter, **kw)

    def _check_t(self, t_s: np.ndarray) -> None:
        if np.any(t_s < 0) or np.any(t_s > self.duration_s):
            raise ValueError(f"time outside trajectory validity [0, {self.duration_s}] s")

    def _position(self, t: np.ndarray):
        if self.kind == "stationary":
            return np.full(t.shape, float(self.start[0])), np.full(t.shape, float(self.start[1]))
        if self.kind == "linear":
            return self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t
        if self.kind == "circular":
            r = 0.5 * self.diameter
            a = self.phase + self.angular_rate * t
            return self.center[0] + r * np.cos(a), self.center[1] + r * np.sin(a)
        wp = np.asarray(self.waypoints, dtype=float)
        return np.interp(t, wp[:, 0], wp[:, 1]), np.interp(t, wp[:, 0], wp[:, 2])

    def _velocity(self, t: np.ndarray):
        if self.kind == "stationary":
            return np.zeros(t.shape), np.zeros(t.shape)
        if self.kind == "linear":
            return np.full(t.shape, float(self.velocity[0])), np.full(t.shape, float(self.velocity[1]))
        if self.kind == "circular":
            r = 0.5 * self.diameter
            a = self.phase + self.angular_rate * t
            return -r * self.angular_rate * np.sin(a), r * self.angular_rate * np.cos(a)
        wp = np.asarray(self.waypoints, dtype=float)
        seg = np.clip(np.searchsorted(wp[:, 0], t, side="right") - 1, 0, len(wp) - 2)
        dt = wp[seg + 1, 0] - wp[seg, 0]
        return (wp[seg + 1, 1] - wp[seg, 1]) / dt, (wp[seg + 1, 2] - wp[seg, 2]) / dt

    def position(self, t_s):
        t = np.asarray(t_s, dtype=float)
        self._check_t(t)
        return self._position(t)

    def velocity_at(self, t_s):
        t = np.asarray(t_s, dtype=float)
        self._check_t(t)
        return self._velocity(t)

    def max_speed(self) -> float:
        if self.kind == "circular":
            return 0.5 * self.diameter * abs(self.angular_rate)
        if self.kind == "waypoints":
            wp = np.asarray(self.waypoints, dtype=float)
            return float(np.max(np.hypot(np.diff(wp[:, 1]), np.diff(wp[:, 2])) / np.diff(wp[:, 0])))
        return float(math.hypot(*self.velocity)) if self.kind == "linear" else 0.0


def pixel_speed(traj: Trajectory, t_us) -> float:
    """Image-plane speed (px/s) at ``t_us`` microseconds."""
    vx, vy = traj.velocity_at(np.asarray(t_us, dtype=float) * 1e-6)
    return np.hypot(vx, vy) if np.ndim(vx) else float(math.hypot(vx, vy))


@dataclass(frozen=True)
class LedModel:
    lambda1: float = 6.0
    lambda2: float = 6.0
    theta: float = 0.0
    follow_velocity: bool = False
    events_per_edge: float = 30.0
    motion_event_rate: float = 2.0       # events per px of travel while lit
    noise_rate: float = 30000.0          # events/s over the whole sensor
    edge_latency_us: float = 5.0         # mean of the exponential event delay
    motion_sweep_s: float = 1e-3

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("LED axes must be positive")
        if self.lambda1 < self.lambda2:
            raise ValueError("lambda1 is the major semi-axis and must be >= lambda2")
        for name in ("events_per_edge", "motion_event_rate", "noise_rate", "edge_latency_us", "motion_sweep_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def orientation(self, vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
        if self.follow_velocity:
            moving = np.hypot(vx, vy) > 0
            return np.where(moving, np.arctan2(vy, vx), self.theta)
        return np.full(np.shape(vx), self.theta)


@dataclass(frozen=True)
class GroundTruth:
    t_us: np.ndarray
    x: np.ndarray
    y: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    theta: np.ndarray
    bit: np.ndarray                # LED level at the sample time
    speed: np.ndarray              # px/s
    schedule: OnOffSchedule
    counts: dict = field(default_factory=dict)   # events per source before clipping
    labels: Optional[np.ndarray] = None          # per output event: 0 edge, 1 motion, 2 noise

    def position_at(self, t_us) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t_us, dtype=float)
        return np.interp(t, self.t_us, self.x), np.interp(t, self.t_us, self.y)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_us", "x", "y", "l1", "l2", "theta", "bit"])
            for row in zip(self.t_us.tolist(), self.x.tolist(), self.y.tolist(), self.lambda1.tolist(),
                           self.lambda2.tolist(), self.theta.tolist(), self.bit.tolist()):
                w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:6]] + [row[6]])

    @classmethod
    def read_csv(cls, path, schedule: Optional[OnOffSchedule] = None) -> "GroundTruth":
        rows = list(csv.DictReader(open(path, newline="")))
        col = lambda k, f=float: np.array([f(r[k]) for r in rows])
        t = col("t_us", int)
        x, y = col("x"), col("y")
        sp = np.zeros(len(rows))
        if len(rows) > 1:
            sp = np.hypot(np.gradient(x, t * 1e-6), np.gradient(y, t * 1e-6))
        sched = schedule or OnOffSchedule(1000.0, np.empty(0), np.empty(0))
        return cls(t, x, y, col("l1"), col("l2"), col("theta"), col("bit", int), sp, sched)


class _Sources(NamedTuple):
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray


def _blob_offsets(rng, n, l1, l2, theta):
    z = rng.standard_normal((n, 2))
    c, s = np.cos(theta), np.sin(theta)
    u, v = z[:, 0] * l1, z[:, 1] * l2
    return c * u - s * v, s * u + c * v


def _edge_events(rng, traj, led, sched) -> _Sources:
    counts = rng.poisson(led.events_per_edge, len(sched))
    idx = np.repeat(np.arange(len(sched)), counts)
    n = idx.size
    delay = rng.exponential(led.edge_latency_us, n) if led.edge_latency_us > 0 else np.zeros(n)
    t = np.minimum(sched.edges_t[idx] + delay, traj.duration_s * 1e6)
    px, py = traj.position(t * 1e-6)
    vx, vy = traj.velocity_at(t * 1e-6)
    dx, dy = _blob_offsets(rng, n, led.lambda1, led.lambda2, led.orientation(vx, vy))
    p = np.where(sched.levels[idx] == ON, 1, -1)
    return _Sources(t, px + dx, py + dy, p)


def _motion_events(rng, traj, led, sched, duration_us) -> _Sources:
    vmax = traj.max_speed()
    rate = led.motion_event_rate * vmax          # peak events/s
    n = rng.poisson(rate * duration_us * 1e-6) if rate > 0 else 0
    t = np.sort(rng.uniform(0.0, duration_us, n))
    u = rng.uniform(0.0, 1.0, n)
    vx, vy = traj.velocity_at(t * 1e-6)
    speed = np.hypot(vx, vy)
    keep = (u * vmax < speed) & (sched.level_at(t) == ON) if n else np.zeros(0, bool)
    t, vx, vy, speed = t[keep], vx[keep], vy[keep], speed[keep]
    m = t.size
    px, py = traj.position(t * 1e-6)
    along = np.arctan2(vy, vx)
    base = led.orientation(vx, vy)
    # blob stretched along the direction of travel
    major = led.lambda1 + speed * led.motion_sweep_s
    minor = led.lambda2
    moving = speed > 0
    dx, dy = _blob_offsets(rng, m, np.where(moving, major, led.lambda1),
                           np.where(moving, minor, led.lambda2), np.where(moving, along, base))
    p = np.where(rng.uniform(0.0, 1.0, m) < 0.5, 1, -1)
    return _Sources(t, px + dx, py + dy, p)


def _noise_events(rng, traj, led, duration_us) -> _Sources:
    n = rng.poisson(led.noise_rate * duration_us * 1e-6) if led.noise_rate > 0 else 0
    t = rng.uniform(0.0, duration_us, n)
    x = rng.uniform(0.0, traj.width, n)
    y = rng.uniform(0.0, traj.height, n)
    p = np.where(rng.uniform(0.0, 1.0, n) < 0.5, 1, -1)
    return _Sources(t, np.floor(x), np.floor(y), p)


def simulate(traj: Trajectory, led: LedModel, schedule: OnOffSchedule, seed: int,
             tail_us: float = 4000.0) -> tuple[np.ndarray, GroundTruth]:
    """Render the event stream for ``schedule`` plus ``tail_us`` of trailing time."""
    duration_us = schedule.end_us + tail_us
    if duration_us > traj.duration_s * 1e6:
        raise ValueError(f"schedule needs {duration_us * 1e-6:.4f} s but trajectory is valid for {traj.duration_s} s")
    if len(schedule) and schedule.edges_t[0] < 0:
        raise ValueError("schedule starts before t = 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    srcs = [_edge_events(rng, traj, led, schedule),
            _motion_events(rng, traj, led, schedule, duration_us),
            _noise_events(rng, traj, led, duration_us)]
    counts = dict(zip(("edge", "motion", "noise"), (s.t.size for s in srcs)))
    t = np.concatenate([s.t for s in srcs])
    # pixel k is centred on coordinate k
    x = np.floor(np.concatenate([s.x for s in srcs]) + 0.5)
    y = np.floor(np.concatenate([s.y for s in srcs]) + 0.5)
    p = np.concatenate([s.p for s in srcs])
    lab = np.repeat(np.arange(3, dtype=np.int8), [s.t.size for s in srcs])
    inside = (x >= 0) & (x < traj.width) & (y >= 0) & (y < traj.height)
    t, x, y, p, lab = t[inside], x[inside], y[inside], p[inside], lab[inside]
    order = np.argsort(np.floor(t), kind="stable")
    events = make_events(np.floor(t[order]).astype(np.int64), x[order], y[order], p[order]) if t.size else empty_events()
    gt = ground_truth(traj, led, schedule, duration_us, counts)
    return events, replace(gt, labels=lab[order])


def ground_truth(traj: Trajectory, led: LedModel, schedule: OnOffSchedule, duration_us: float,
                 counts: Optional[dict] = None) -> GroundTruth:
    step = 1e6 / TRUTH_RATE_HZ
    t_us = (np.arange(int(math.floor(duration_us / step)) + 1) * step).astype(np.int64)
    x, y = traj.position(t_us * 1e-6)
    vx, vy = traj.velocity_at(t_us * 1e-6)
    n = t_us.size
    return GroundTruth(t_us, x, y, np.full(n, float(led.lambda1)),
                       np.full(n, float(led.lambda2)), led.orientation(vx, vy),
                       schedule.level_at(t_us.astype(float)), np.hypot(vx, vy), schedule, dict(counts or {}))
