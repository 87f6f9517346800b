"""Self-generating sweeps: per-packet latency by carrier, accuracy by pixel speed."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import modem
from .pipeline import PipelineConfig, run
from .simulate import LedModel, Trajectory, simulate

BENCH_FREQS = (1000.0, 2500.0, 5000.0, 10000.0)
BENCH_TRACKERS = ("gaukf", "ekf")
REPORT_SPEEDS = (1500.0, 3000.0, 4500.0, 6000.0, 12000.0)
REPORT_CARRIERS = (1000.0, 5000.0, 10000.0)

SAMPLE_TEXT = (
    b"Light from a small lamp can carry words across a busy room when the camera "
    b"watching it reacts to every change in brightness. Each flash becomes a burst "
    b"of events, and the receiver follows the moving spot while it reads the "
    b"pattern one bit at a time."
)


def filler_text(n_bytes: int) -> bytes:
    """Repeat the sample prose up to ``n_bytes`` (at least one character)."""
    reps = -(-max(n_bytes, 1) // len(SAMPLE_TEXT))
    return (SAMPLE_TEXT + b" ") * reps if n_bytes > len(SAMPLE_TEXT) else SAMPLE_TEXT[:max(n_bytes, 1)]


@dataclass(frozen=True)
class BenchRow:
    freq_hz: float
    tracker: str
    mean_us: float
    p99_us: float
    max_us: float
    events_per_packet: float


def bench_workload(freq_hz: float, n_packets: int, seed: int, speed: float = 3000.0,
                   led: LedModel = LedModel(), window_us: int = 4000):
    """Event stream covering ``n_packets + 1`` windows of a moving LED at ``freq_hz``."""
    span_us = (n_packets + 1) * window_us
    n_chars = int(np.ceil(span_us * freq_hz * 1e-6 / 10.0)) + 1
    sched = modem.encode(filler_text(n_chars)[:n_chars].replace(b" ", b"_") or b"x", freq_hz)
    traj = Trajectory.circular_at_speed(speed) if speed > 0 else Trajectory()
    events, truth = simulate(traj, led, sched, seed)
    return events[events["t"] < span_us], truth


def bench(freqs: Sequence[float] = BENCH_FREQS, trackers: Sequence[str] = BENCH_TRACKERS,
          n_packets: int = 20, seed: int = 0, cfg: PipelineConfig = PipelineConfig(),
          repeats: int = 3):
    """Per-packet processing time for each (carrier, tracker).

    The acquisition packet is excluded; every other packet of the workload is
    timed. Each workload is replayed ``repeats`` times and every packet keeps
    its fastest time, which filters out scheduler stalls. Returns the summary rows and the per-packet samples
    ``(freq_hz, tracker, n_filtered, elapsed_us)``.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    rows, samples = [], []
    for f in freqs:
        events, _ = bench_workload(f, n_packets, seed, window_us=cfg.window_us)
        for tr in trackers:
            runs = [run(events, replace(cfg, tracker=tr, carrier_hz=f)) for _ in range(repeats)]
            pk = runs[0].packet_rows[1:]
            t = np.min([[r[6] for r in rep.packet_rows[1:]] for rep in runs], axis=0)
            n = np.array([r[4] for r in pk])
            rows.append(BenchRow(f, tr, float(t.mean()), float(np.percentile(t, 99)), float(t.max()),
                                 float(n.mean())))
            samples.extend((f, tr, int(k), float(v)) for k, v in zip(n, t))
    return rows, samples


def write_bench(path, rows: Sequence[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq_hz", "tracker", "mean_us", "p99_us", "max_us", "events_per_packet"])
        for r in rows:
            w.writerow([f"{r.freq_hz:.0f}", r.tracker, f"{r.mean_us:.1f}", f"{r.p99_us:.1f}",
                        f"{r.max_us:.1f}", f"{r.events_per_packet:.1f}"])


def write_bench_samples(path, samples) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq_hz", "tracker", "events", "elapsed_us"])
        for f, tr, n, t in samples:
            w.writerow([f"{f:.0f}", tr, n, f"{t:.1f}"])


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares ``y = a + b x``; returns (a, b, R^2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    b, a = np.polyfit(x, y, 1)
    resid = y - (a + b * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return float(a), float(b), 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 0.0


@dataclass(frozen=True)
class AccuracyCell:
    speed: float
    carrier_hz: float
    rep: int
    seed: int
    word_accuracy: float
    char_accuracy: float
    rms_error: float
    losses: int


def speed_accuracy(speeds: Sequence[float] = REPORT_SPEEDS, carriers: Sequence[float] = REPORT_CARRIERS,
                   reps: int = 2, seed: int = 0, text: bytes = SAMPLE_TEXT,
                   led: LedModel = LedModel(), cfg: PipelineConfig = PipelineConfig()):
    """Word accuracy over the circular-path grid; seeds are ``seed + rep``."""
    cells = []
    for sp in speeds:
        traj = Trajectory.circular_at_speed(sp)
        for f in carriers:
            sched = modem.encode(text, f)
            for k in range(reps):
                events, truth = simulate(traj, led, sched, seed + k)
                rep = run(events, replace(cfg, carrier_hz=f), truth, text)
                cells.append(AccuracyCell(sp, f, k, seed + k, rep.word_accuracy, rep.char_accuracy,
                                          rep.rms_error if rep.rms_error is not None else float("nan"),
                                          rep.losses))
    return cells


def accuracy_grid(cells: Sequence[AccuracyCell]) -> dict:
    """Mean word accuracy keyed by (speed, carrier)."""
    acc: dict = {}
    for c in cells:
        acc.setdefault((c.speed, c.carrier_hz), []).append(c.word_accuracy)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def write_speed_accuracy(path, cells: Sequence[AccuracyCell]) -> None:
    grid = accuracy_grid(cells)
    speeds = sorted({k[0] for k in grid})
    carriers = sorted({k[1] for k in grid})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["speed_px_s"] + [f"acc_{f:.0f}hz" for f in carriers])
        for s in speeds:
            w.writerow([f"{s:.0f}"] + [f"{grid[(s, f)]:.4f}" for f in carriers])
    detail = Path(path).with_name(Path(path).stem + "_runs.csv")
    with open(detail, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["speed_px_s", "carrier_hz", "rep", "seed", "word_accuracy", "char_accuracy",
                    "rms_error_px", "losses"])
        for c in cells:
            w.writerow([f"{c.speed:.0f}", f"{c.carrier_hz:.0f}", c.rep, c.seed, f"{c.word_accuracy:.4f}",
                        f"{c.char_accuracy:.4f}", f"{c.rms_error:.3f}", c.losses])
