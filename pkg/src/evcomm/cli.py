"""Command line: simulate, encode, run, bench, report.

Exit codes: 0 success, 1 operational error (missing or unreadable files),
2 usage or configuration error. Values from ``--config`` are overridden by
flags given on the command line.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import bench as benchm
from . import modem
from .events import write_events
from .pipeline import PipelineConfig, apply_flat, read_flat_config, run
from .simulate import KINDS, GroundTruth, LedModel, Trajectory, simulate


class UsageError(Exception):
    """Bad flags or configuration values (exit code 2)."""


def _text_arg(value: Optional[str]) -> Optional[bytes]:
    """Literal text, or ``@path`` to read the payload bytes from a file."""
    if value is None:
        return None
    if value.startswith("@"):
        return Path(value[1:]).read_bytes()
    return value.encode()


def _floats(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from None


def _waypoints(value: str) -> tuple:
    try:
        rows = tuple(tuple(float(v) for v in item.split(",")) for item in value.split(";") if item.strip())
    except ValueError:
        raise argparse.ArgumentTypeError("waypoints are 't_s,x,y;t_s,x,y;...'") from None
    if any(len(r) != 3 for r in rows):
        raise argparse.ArgumentTypeError("each waypoint needs t_s,x,y")
    return rows


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out-dir", default=".", help="directory for output files")


def _modem_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--carrier-hz", type=float)
    p.add_argument("--theta-hi", type=float)
    p.add_argument("--theta-lo", type=float)
    p.add_argument("--auto-threshold", action="store_true", default=None)


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tracker", choices=("gaukf", "ekf"))
    p.add_argument("--window-us", type=int)
    p.add_argument("--budget-us", type=float)
    p.add_argument("--k-roi", type=float)
    p.add_argument("--concurrent", action="store_true", default=None,
                   help="run decoding on a second thread behind the shared buffer")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evcomm", description="Event-camera optical communication toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic event stream")
    _common(s)
    s.add_argument("--text", help="payload text, or @file")
    s.add_argument("--traj", choices=KINDS)
    s.add_argument("--diameter-px", type=float)
    s.add_argument("--speed-px-s", type=float, help="rim speed (circular) or speed along +x (linear)")
    s.add_argument("--center", type=_floats, help="x,y of the circle center or stationary position")
    s.add_argument("--velocity", type=_floats, help="vx,vy for a linear path")
    s.add_argument("--waypoints", type=_waypoints)
    s.add_argument("--duration-s", type=float)
    s.add_argument("--carrier-hz", type=float)
    s.add_argument("--events-per-edge", type=float)
    s.add_argument("--motion-rate", type=float, help="motion events per px of travel")
    s.add_argument("--noise-rate", type=float, help="background events/s")
    s.add_argument("--led-axes", type=_floats, help="lambda1,lambda2 in px")
    s.add_argument("--format", choices=("evb", "csv"))

    e = sub.add_parser("encode", help="write the on/off schedule for a payload")
    _common(e)
    e.add_argument("--text", help="payload text, or @file")
    e.add_argument("--carrier-hz", type=float)

    r = sub.add_parser("run", help="track and decode an event file")
    _common(r)
    r.add_argument("--events", required=True, help="events .csv or .evb")
    r.add_argument("--reference", help="reference payload file (or @file) for accuracy")
    r.add_argument("--truth", help="truth.csv for tracking error")
    r.add_argument("--realtime", action="store_true", default=None, help="pace input at wall-clock speed")
    _modem_flags(r)
    _pipeline_flags(r)

    b = sub.add_parser("bench", help="per-packet latency sweep over carriers and trackers")
    _common(b)
    b.add_argument("--freqs", type=_floats)
    b.add_argument("--trackers", type=lambda v: [t for t in v.split(",") if t])
    b.add_argument("--packets", type=int)
    b.add_argument("--repeats", type=int, help="replays per workload; each packet keeps its fastest time")

    p = sub.add_parser("report", help="word accuracy over pixel speed and carrier")
    _common(p)
    p.add_argument("--speeds", type=_floats)
    p.add_argument("--carriers", type=_floats)
    p.add_argument("--reps", type=int)
    p.add_argument("--text", help="payload text, or @file")
    _pipeline_flags(p)
    return ap


def _load(args) -> dict[str, str]:
    if not args.config:
        return {}
    path = Path(args.config)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        return read_flat_config(path)
    except Exception as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None


def _pick(flag, flat: dict, key: str, default, cast=float):
    if flag is not None:
        return flag
    if key in flat:
        try:
            return cast(flat[key])
        except ValueError:
            raise UsageError(f"bad value for {key}: {flat[key]!r}") from None
    return default


def _pipeline_cfg(args, flat: dict) -> PipelineConfig:
    try:
        cfg = apply_flat(PipelineConfig(), flat)
        over = {}
        for name in ("tracker", "window_us", "budget_us", "k_roi", "concurrent", "realtime",
                     "carrier_hz", "theta_hi", "theta_lo", "auto_threshold"):
            val = getattr(args, name, None)
            if val is not None:
                over[name] = val
        return replace(cfg, **over)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _seed(args, flat) -> int:
    return _pick(args.seed, flat, "sim.seed", 0, int)


def cmd_simulate(args) -> int:
    flat = _load(args)
    text = _text_arg(args.text) if args.text is not None else (flat["sim.text"].encode() if "sim.text" in flat else None)
    if text is None:
        raise UsageError("simulate needs --text (literal or @file)")
    try:
        kind = _pick(args.traj, flat, "sim.traj", "stationary", str)
        carrier = _pick(args.carrier_hz, flat, "modem.carrier_hz", 1000.0)
        speed = _pick(args.speed_px_s, flat, "sim.speed_px_s", 0.0)
        diameter = _pick(args.diameter_px, flat, "sim.diameter_px", 610.0)
        duration = _pick(args.duration_s, flat, "sim.duration_s", None)
        center = tuple(args.center) if args.center else (640.0, 360.0)
        sched = modem.encode(text, carrier)
        if duration is None:
            duration = (sched.end_us + 4000.0) * 1e-6 + 1e-3
        common = dict(duration_s=duration)
        if kind == "circular":
            traj = Trajectory.circular_at_speed(speed, diameter, center=center, **common)
        elif kind == "linear":
            vel = tuple(args.velocity) if args.velocity else (speed, 0.0)
            traj = Trajectory(kind="linear", start=center, velocity=vel, **common)
        elif kind == "waypoints":
            if not args.waypoints:
                raise UsageError("--traj waypoints needs --waypoints")
            traj = Trajectory(kind="waypoints", waypoints=args.waypoints, **common)
        else:
            traj = Trajectory(kind="stationary", start=center, **common)
        axes = args.led_axes or [_pick(None, flat, "sim.led_lambda1", 6.0), _pick(None, flat, "sim.led_lambda2", 6.0)]
        led = LedModel(lambda1=axes[0], lambda2=axes[1],
                       events_per_edge=_pick(args.events_per_edge, flat, "sim.events_per_edge", 30.0),
                       motion_event_rate=_pick(args.motion_rate, flat, "sim.motion_event_rate", 2.0),
                       noise_rate=_pick(args.noise_rate, flat, "sim.noise_rate", 30000.0))
        events, truth = simulate(traj, led, sched, _seed(args, flat))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fmt = _pick(args.format, flat, "sim.format", "evb", str)
    write_events(out / f"events.{fmt}", events)
    truth.write_csv(out / "truth.csv")
    sched.write_csv(out / "schedule.csv")
    print(f"wrote {events.size} events ({truth.counts}) to {out}")
    return 0


def cmd_encode(args) -> int:
    flat = _load(args)
    text = _text_arg(args.text)
    if text is None:
        raise UsageError("encode needs --text (literal or @file)")
    try:
        sched = modem.encode(text, _pick(args.carrier_hz, flat, "modem.carrier_hz", 1000.0))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched.write_csv(out / "schedule.csv")
    print(f"{len(sched.bits)} bits, {len(sched)} edges, {sched.end_us / 1000:.3f} ms")
    return 0


def cmd_run(args) -> int:
    flat = _load(args)
    cfg = _pipeline_cfg(args, flat)
    src = Path(args.events)
    if not src.is_file():
        raise FileNotFoundError(f"events file not found: {src}")
    reference = None
    if args.reference:
        reference = _text_arg(args.reference if args.reference.startswith("@") else "@" + args.reference)
    truth = GroundTruth.read_csv(args.truth) if args.truth else None
    report = run(src, cfg, truth, reference)
    report.write(args.out_dir)
    print(report.summary())
    return 0


def cmd_bench(args) -> int:
    flat = _load(args)
    cfg = _pipeline_cfg(args, flat)
    freqs = args.freqs or list(benchm.BENCH_FREQS)
    trackers = args.trackers or list(benchm.BENCH_TRACKERS)
    bad = [t for t in trackers if t not in ("gaukf", "ekf")]
    if bad:
        raise UsageError(f"unknown tracker(s): {bad}")
    packets = _pick(args.packets, flat, "bench.packets", 20, int)
    repeats = _pick(args.repeats, flat, "bench.repeats", 3, int)
    if repeats < 1:
        raise UsageError(f"--repeats must be >= 1, got {repeats}")
    rows, samples = benchm.bench(freqs, trackers, packets, _seed(args, flat), cfg, repeats)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    benchm.write_bench(out / "bench.csv", rows)
    benchm.write_bench_samples(out / "bench_packets.csv", samples)
    for r in rows:
        print(f"{r.freq_hz:7.0f} Hz {r.tracker:5s} mean {r.mean_us:9.1f} us  p99 {r.p99_us:9.1f} us  "
              f"max {r.max_us:9.1f} us  {r.events_per_packet:7.1f} ev/pkt")
    return 0


def cmd_report(args) -> int:
    flat = _load(args)
    cfg = _pipeline_cfg(args, flat)
    text = _text_arg(args.text) or benchm.SAMPLE_TEXT
    cells = benchm.speed_accuracy(args.speeds or list(benchm.REPORT_SPEEDS),
                                  args.carriers or list(benchm.REPORT_CARRIERS),
                                  _pick(args.reps, flat, "report.reps", 2, int), _seed(args, flat), text, cfg=cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    benchm.write_speed_accuracy(out / "speed_accuracy.csv", cells)
    print((out / "speed_accuracy.csv").read_text(), end="")
    return 0


COMMANDS = {"simulate": cmd_simulate, "encode": cmd_encode, "run": cmd_run,
            "bench": cmd_bench, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)      # exits with 2 on bad usage
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
