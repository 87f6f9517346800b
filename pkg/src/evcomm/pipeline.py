"""End-to-end receiver: filter -> ring -> tracker -> ROI gate -> shared buffer -> decoder.

Timing scope: each packet's measured time covers the spatial filter, the
tracker step (including its measurement gating) and the ROI gate of the
decoder stream. Ring/shared-buffer handoff and decoding are excluded, since
they belong to the consumer side.

Shared buffer sizing: ``ring_capacity`` packets (64 by default, 256 ms of
stream at 4 ms windows). Offline runs apply backpressure instead of dropping,
so results never depend on thread scheduling; ``realtime`` runs drop the
oldest packet and count it in ``ring_overflow``.
"""
from __future__ import annotations

import ast
import configparser
import csv
import gc
import math
import threading
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import ekf as ekfm
from . import gaukf
from . import geometry as geo
from . import modem
from .events import DEFAULT_RING_CAPACITY, DEFAULT_WINDOW_US, EVENT_DTYPE, EventPacket, RingBuffer, packetize, read_events
from .simulate import SENSOR_HEIGHT, SENSOR_WIDTH, GroundTruth
from .spatial_filter import DEFAULT_ACTIVITY_THRESHOLD, DEFAULT_CELL_SIZE, GridFilter

TRACKERS = ("gaukf", "ekf")
TRACE_HEADER = ("t_us", "x", "y", "vx", "vy", "l1", "l2", "theta", "omega", "step_us")
TIMING_HEADER = ("packet", "t_start_us", "t_end_us", "n_in", "n_filtered", "n_gated", "elapsed_us", "over_budget",
                 "cpu_us")


@dataclass(frozen=True)
class Roi:
    """Mahalanobis ellipse ``d <= k`` under ``shape`` around a moving center.

    ``center`` is valid at ``t`` (us); for an event at time ``t_e`` the center
    is taken back along ``velocity`` to ``center - velocity * (t - t_e)``.
    """

    center: tuple
    shape: geo.Spd2
    k: float
    t: int
    velocity: tuple = (0.0, 0.0)

    def __post_init__(self):
        geo.check_spd(self.shape)
        if not self.k > 0:
            raise ValueError("k_roi must be positive")

    @property
    def area(self) -> float:
        return math.pi * self.k * self.k * math.sqrt(self.shape.det)

    def mask(self, events: np.ndarray) -> np.ndarray:
        if events.size == 0:
            return np.zeros(0, dtype=bool)
        lag = (self.t - events["t"].astype(float)) * 1e-6
        dx = events["x"] - (self.center[0] - self.velocity[0] * lag)
        dy = events["y"] - (self.center[1] - self.velocity[1] * lag)
        a, b, c = self.shape
        det = self.shape.det
        d2 = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
        return d2 <= self.k * self.k


def roi_gate(packet: EventPacket, roi: Roi) -> EventPacket:
    return packet.with_events(packet.events[roi.mask(packet.events)])


def roi_from_belief(b: gaukf.FilterBelief, k: float) -> Roi:
    v = b.vec
    shape = geo.cov_from_ellipse(b.ellipse)
    return Roi((float(v[0]), float(v[1])), shape, k, int(b.t), (float(v[2]), float(v[3])))


def roi_from_ekf(s: ekfm.EkfState, k: float) -> Roi:
    shape = geo.floor_cov(geo.cov_from_ellipse(ekfm.ellipse_of(s)))
    return Roi((s.x, s.y), shape, k, int(s.t), (float(s.vec[2]), float(s.vec[3])))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    window_us: int = DEFAULT_WINDOW_US
    tracker: str = "gaukf"
    k_roi: float = 3.5
    budget_us: Optional[float] = None        # defaults to window_us
    lost_after: int = 50                     # empty windows before re-acquisition
    ring_capacity: int = DEFAULT_RING_CAPACITY
    concurrent: bool = False
    realtime: bool = False
    width: int = SENSOR_WIDTH
    height: int = SENSOR_HEIGHT
    cell_size: int = DEFAULT_CELL_SIZE
    activity_threshold: int = DEFAULT_ACTIVITY_THRESHOLD
    carrier_hz: float = 1000.0
    theta_hi: float = 3.0
    theta_lo: float = -3.0
    auto_threshold: bool = False
    decay_tau: Optional[float] = None
    ukf: gaukf.UkfParams = field(default_factory=gaukf.UkfParams)
    ekf: ekfm.EkfParams = field(default_factory=ekfm.EkfParams)

    def __post_init__(self):
        if self.tracker not in TRACKERS:
            raise ValueError(f"tracker must be one of {TRACKERS}, got {self.tracker!r}")
        if self.window_us <= 0:
            raise ValueError("window_us must be positive")
        if not self.k_roi > 0:
            raise ValueError("k_roi must be positive")
        if self.budget_us is not None and not 0 < self.budget_us <= self.window_us:
            raise ValueError("budget_us must lie in (0, window_us]: a packet that takes longer than "
                             "its window lets the next one arrive before it is processed")
        if self.lost_after < 1:
            raise ValueError("lost_after must be >= 1")
        if not self.theta_hi > self.theta_lo:
            raise ValueError("theta_hi must exceed theta_lo")

    @property
    def budget(self) -> float:
        return float(self.window_us if self.budget_us is None else self.budget_us)


# section -> (target, field names); "pipeline", "filter" and "modem" all land on PipelineConfig
_SECTIONS = {
    "pipeline": ("window_us", "tracker", "k_roi", "budget_us", "lost_after", "ring_capacity",
                 "concurrent", "realtime", "width", "height"),
    "filter": ("cell_size", "activity_threshold"),
    "modem": ("carrier_hz", "theta_hi", "theta_lo", "auto_threshold", "decay_tau"),
}


def _coerce(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if text.lower() in ("none", ""):
        return None
    if isinstance(like, str):
        return text
    try:
        val = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise ValueError(f"cannot parse value {text!r}") from None
    if isinstance(like, tuple):
        return tuple(float(v) for v in (val if isinstance(val, (tuple, list)) else (val,)))
    if isinstance(like, int) and not isinstance(val, bool) and float(val).is_integer():
        return int(val)
    return float(val) if isinstance(val, (int, float)) else val


def read_flat_config(path) -> dict[str, str]:
    """``section.key = value`` lines (``#`` comments allowed) into a flat dict."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    text = Path(path).read_text()
    cp.read_string("[flat]\n" + text)
    return dict(cp["flat"])


def apply_flat(cfg: PipelineConfig, flat: dict[str, str], strict: bool = True) -> PipelineConfig:
    """Override ``cfg`` fields from flat ``section.key`` entries; unknown sections are skipped."""
    top: dict = {}
    ukf_kw: dict = {}
    ekf_kw: dict = {}
    ukf_fields = {f.name: f for f in fields(gaukf.UkfParams)}
    ekf_fields = {f.name: f for f in fields(ekfm.EkfParams)}
    for key, raw in flat.items():
        if "." not in key:
            raise ValueError(f"config key {key!r} is not of the form section.key")
        sec, name = key.split(".", 1)
        if sec == "ukf":
            if name not in ukf_fields:
                raise ValueError(f"unknown config key {key!r}")
            ukf_kw[name] = _coerce(raw, getattr(cfg.ukf, name))
        elif sec == "ekf":
            if name not in ekf_fields:
                raise ValueError(f"unknown config key {key!r}")
            ekf_kw[name] = _coerce(raw, getattr(cfg.ekf, name))
        elif sec in _SECTIONS:
            if name not in _SECTIONS[sec]:
                raise ValueError(f"unknown config key {key!r}")
            like = getattr(cfg, name)
            top[name] = _coerce(raw, like if like is not None else 0.0)
        elif strict and sec not in ("sim", "run", "bench", "report"):
            raise ValueError(f"unknown config section {sec!r}")
    if ukf_kw:
        top["ukf"] = replace(cfg.ukf, **ukf_kw)
    if ekf_kw:
        top["ekf"] = replace(cfg.ekf, **ekf_kw)
    return replace(cfg, **top)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    """Outcome of one pipeline run.

    ``timing_us`` has one entry per packet (filter + track + gate wall time);
    decoding runs outside the timed span. Budget violations count wall time.
    Each packet row also carries the thread CPU time of the same span, so a
    wall-clock overrun caused by descheduling can be told apart from slow work.
    ``rms_error`` compares the tracker position at each tracked packet's end
    with linearly interpolated ground truth.
    """

    decoded: bytes
    word_accuracy: Optional[float]
    char_accuracy: Optional[float]
    timing_us: np.ndarray
    packet_rows: list
    trace: list
    budget_us: float
    budget_violations: int
    rms_error: Optional[float]
    mean_speed: Optional[float]
    acquisitions: int
    losses: int
    ring_overflow: int
    diagnostic: str = ""
    signal_capture: Optional[float] = None
    reference: Optional[bytes] = None

    @property
    def cpu_budget_violations(self) -> int:
        """Packets whose own thread CPU time exceeded the budget.

        Wall-clock overruns without a matching CPU overrun come from the
        process being descheduled, not from the per-packet work.
        """
        return sum(1 for r in self.packet_rows if r[8] > self.budget_us)

    @property
    def mean_us(self) -> float:
        return float(self.timing_us.mean()) if self.timing_us.size else 0.0

    @property
    def p99_us(self) -> float:
        return float(np.percentile(self.timing_us, 99)) if self.timing_us.size else 0.0

    @property
    def max_us(self) -> float:
        return float(self.timing_us.max()) if self.timing_us.size else 0.0

    def summary(self) -> str:
        fmt = lambda v, spec: "n/a" if v is None else format(v, spec)
        lines = [
            f"decoded bytes       : {len(self.decoded)}",
            f"word accuracy       : {fmt(self.word_accuracy, '.4f')}",
            f"char accuracy       : {fmt(self.char_accuracy, '.4f')}",
            f"packets             : {self.timing_us.size}",
            f"timing mean/p99/max : {self.mean_us:.1f} / {self.p99_us:.1f} / {self.max_us:.1f} us",
            f"budget violations   : {self.budget_violations} (budget {self.budget_us:.0f} us, "
            f"{self.cpu_budget_violations} by thread CPU time)",
            f"rms position error  : {fmt(self.rms_error, '.3f')} px",
            f"mean pixel speed    : {fmt(self.mean_speed, '.1f')} px/s",
            f"acquisitions/losses : {self.acquisitions} / {self.losses}",
        ]
        if self.diagnostic:
            lines.append(f"diagnostic          : {self.diagnostic}")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "decoded.bin").write_bytes(self.decoded)
        (out / "summary.txt").write_text(self.summary() + "\n")
        with open(out / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMING_HEADER)
            for row in self.packet_rows:
                w.writerow(row[:6] + [f"{row[6]:.1f}", row[7], f"{row[8]:.1f}"])
        with open(out / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for row in self.trace:
                w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:9]] + [f"{row[9]:.1f}"])
        if self.reference is not None:
            modem.write_words_csv(out / "words.csv", self.decoded, self.reference)


class _Tracker:
    """Acquisition, tracking and loss bookkeeping around either filter."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.belief = None
        self.empty = 0
        self.acquisitions = 0
        self.losses = 0

    @property
    def tracking(self) -> bool:
        return self.belief is not None

    def _gate(self, prior, packet: EventPacket) -> EventPacket:
        return roi_gate(packet, roi_from_belief(prior, self.cfg.k_roi))

    def acquire(self, packet: EventPacket) -> bool:
        z = gaukf.make_measurement(packet.events, packet.t_end, self.cfg.ukf)
        if z is None:
            return False
        if self.cfg.tracker == "gaukf":
            self.belief = gaukf.initial_belief(z, packet.t_end, self.cfg.ukf)
        else:
            self.belief = ekfm.initial_state(z.x, z.y, z.lambda1, z.lambda2, z.theta, packet.t_end, self.cfg.ekf)
        self.acquisitions += 1
        self.empty = 0
        return True

    def step(self, packet: EventPacket) -> None:
        cfg = self.cfg
        if cfg.tracker == "gaukf":
            nxt = gaukf.step(self.belief, packet, cfg.ukf, gate=self._gate)
            got = nxt.updated
        else:
            gated = roi_gate(packet, roi_from_ekf(self.belief, cfg.k_roi))
            nxt = ekfm.ekf_step(self.belief, gated, cfg.ekf)
            got = len(gated) >= cfg.ukf.n_min
        self.belief = nxt
        self.empty = 0 if got else self.empty + 1
        if self.empty >= cfg.lost_after:
            self.belief = None
            self.losses += 1

    def roi(self) -> Optional[Roi]:
        if self.belief is None:
            return None
        if self.cfg.tracker == "gaukf":
            return roi_from_belief(self.belief, self.cfg.k_roi)
        return roi_from_ekf(self.belief, self.cfg.k_roi)

    def trace_row(self, step_us: float) -> list:
        b = self.belief
        if self.cfg.tracker == "gaukf":
            v = b.vec
            l1, l2 = gaukf.reported_lambdas(b)
            return [int(b.t), v[0], v[1], v[2], v[3], l1, l2, v[6], v[7], step_us]
        v = b.vec
        return [int(b.t), v[0], v[1], v[2], v[3], abs(v[6]), abs(v[7]), v[4], v[5], step_us]


class SharedBuffer:
    """Ring buffer plus a condition variable for the two-stage mode."""

    _DONE = object()

    def __init__(self, capacity: int, block: bool):
        self.ring = RingBuffer(capacity)
        self.block = block
        self.cv = threading.Condition()

    def put(self, item) -> None:
        with self.cv:
            while self.block and self.ring.full:
                self.cv.wait()
            self.ring.push(item)
            self.cv.notify_all()

    def close(self) -> None:
        with self.cv:
            while self.ring.full:
                self.cv.wait()
            self.ring.push(self._DONE)
            self.cv.notify_all()

    def get(self):
        with self.cv:
            while True:
                item = self.ring.pop()
                if item is not None:
                    self.cv.notify_all()
                    return None if item is self._DONE else item
                self.cv.wait()


def _warm_up(cfg: PipelineConfig, grid: GridFilter) -> None:
    """Exercise every timed code path once so first-call costs stay out of the budget."""
    rng = np.random.Generator(np.random.PCG64(0))
    n = 64
    ev = np.zeros(n, dtype=EVENT_DTYPE)
    ev["t"] = np.sort(rng.integers(0, cfg.window_us, n))
    ev["x"] = np.clip(cfg.width // 2 + rng.normal(0, 3, n), 0, cfg.width - 1)
    ev["y"] = np.clip(cfg.height // 2 + rng.normal(0, 3, n), 0, cfg.height - 1)
    ev["p"] = 1
    pk = EventPacket(0, cfg.window_us, ev)
    trk = _Tracker(cfg)
    trk.acquire(grid.filter_packet(pk))
    nxt = EventPacket(cfg.window_us, 2 * cfg.window_us, ev.copy())
    nxt.events["t"] += cfg.window_us
    trk.step(grid.filter_packet(nxt))
    roi_gate(nxt, trk.roi())


def _stage1(packets, events_t, cfg, emit, labels=None):
    """Filter, track and gate every packet; ``emit`` receives the ROI events."""
    grid = GridFilter(cfg.width, cfg.height, cfg.cell_size, cfg.activity_threshold)
    _warm_up(cfg, grid)
    trk = _Tracker(cfg)
    ring = RingBuffer(cfg.ring_capacity)
    timing = np.zeros(len(packets))
    rows, trace = [], []
    captured = total = 0
    start_wall = time.perf_counter()
    t_origin = packets[0].t_start if packets else 0
    for i, pk in enumerate(packets):
        if cfg.realtime:
            wait = (pk.t_end - t_origin) * 1e-6 - (time.perf_counter() - start_wall)
            if wait > 0:
                time.sleep(wait)
        t0 = time.perf_counter()
        c0 = time.thread_time()
        keep = grid.keep_mask(pk.events)
        filtered = pk.with_events(pk.events[keep])
        ring.push(filtered)
        cur = ring.pop()
        if trk.tracking:
            trk.step(cur)
            was_tracking = True
        else:
            was_tracking = False
            trk.acquire(cur)
        roi = trk.roi()
        gmask = roi.mask(cur.events) if roi is not None else np.zeros(len(cur), dtype=bool)
        elapsed = (time.perf_counter() - t0) * 1e6
        cpu = (time.thread_time() - c0) * 1e6
        timing[i] = elapsed
        gated = cur.events[gmask]
        emit(gated)
        rows.append([i, pk.t_start, pk.t_end, len(pk), len(cur), int(gated.size), elapsed,
                     int(elapsed > cfg.budget), cpu])
        if trk.tracking:
            trace.append(trk.trace_row(elapsed))
        if labels is not None and was_tracking and trk.tracking:
            lo = int(np.searchsorted(events_t, pk.t_start, side="left"))
            lab = labels[lo:lo + len(pk)]
            sig = lab == 0
            total += int(sig.sum())
            idx = np.flatnonzero(keep)[gmask]
            captured += int((lab[idx] == 0).sum())
    capture = captured / total if labels is not None and total else None
    return timing, rows, trace, trk, ring, capture


def run(events, cfg: PipelineConfig = PipelineConfig(), truth: Optional[GroundTruth] = None,
        reference: Optional[bytes] = None, labels: Optional[np.ndarray] = None) -> RunReport:
    """Process a whole event stream (array or path) and decode it.

    ``labels`` optionally tags each event's source (0 = LED edge) so the
    report can state how many signal events the ROI captured while tracking.
    """
    if isinstance(events, (str, Path)):
        events = read_events(events)
    packets = packetize(events, cfg.window_us)
    times = np.ascontiguousarray(events["t"])
    dec = modem.StreamDecoder(cfg.carrier_hz, cfg.theta_hi, cfg.theta_lo, cfg.auto_threshold, cfg.decay_tau)
    gc_was = gc.isenabled()
    gc.disable()
    try:
        if cfg.concurrent:
            buf = SharedBuffer(cfg.ring_capacity, block=not cfg.realtime)
            errors: list = []

            def consume():
                try:
                    while (item := buf.get()) is not None:
                        dec.feed(item)
                except Exception as exc:          # surfaced after join
                    errors.append(exc)

            th = threading.Thread(target=consume, name="decoder", daemon=True)
            th.start()
            try:
                res = _stage1(packets, times, cfg, buf.put, labels)
            finally:
                buf.close()
                th.join()
            if errors:
                raise errors[0]
            overflow = buf.ring.overflow
        else:
            res = _stage1(packets, times, cfg, dec.feed, labels)
            overflow = 0
    finally:
        if gc_was:
            gc.enable()
    timing, rows, trace, trk, ring, capture = res
    result = dec.decode()
    wa = ca = None
    if reference is not None:
        wa = modem.word_accuracy(result.data, reference)
        ca = modem.char_accuracy(result.data, reference)
    rms = speed = None
    if truth is not None:
        if trace:
            t = np.array([r[0] for r in trace], dtype=float)
            gx, gy = truth.position_at(t)
            ex = np.array([r[1] for r in trace]) - gx
            ey = np.array([r[2] for r in trace]) - gy
            rms = float(np.sqrt(np.mean(ex * ex + ey * ey)))
        speed = float(np.mean(truth.speed))
    return RunReport(result.data, wa, ca, timing, rows, trace, cfg.budget,
                     int(np.count_nonzero(timing > cfg.budget)), rms, speed, trk.acquisitions,
                     trk.losses, overflow + ring.overflow, result.diagnostic, capture,
                     bytes(reference) if reference is not None else None)
