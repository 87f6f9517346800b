"""Software modem: text -> Manchester on/off schedule -> events -> text.

Framing: a preamble of alternating bits plus a sync word, then one 10-bit
frame per byte (start bit 0, eight data bits LSB first, stop bit 1). Each bit
lasts one carrier period and carries a mid-bit transition (1: OFF->ON,
0: ON->OFF), so every bit produces events even though an event camera is
blind to constant illumination.

Receive side: event polarities are integrated with exponential decay into
``s(t)``; a two-threshold comparator turns ``s`` into level transitions; the
framer recovers the bit clock from the preamble and reads bits from the
direction of the transition nearest each expected mid-bit instant.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .events import make_events

OFF, ON = 0, 1
LOW, HIGH = 0, 1
MIN_CARRIER_HZ = 500.0
MAX_CARRIER_HZ = 20000.0
SUBSTITUTE = ord("|")


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OnOffSchedule:
    """LED level changes; ``edges_t`` in microseconds (float), levels alternate."""

    carrier_hz: float
    edges_t: np.ndarray
    levels: np.ndarray
    bits: tuple = ()

    def __post_init__(self):
        t = np.asarray(self.edges_t, dtype=float)
        lv = np.asarray(self.levels, dtype=np.int8)
        if t.shape != lv.shape:
            raise ValueError("edges_t and levels differ in length")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("edge times must be strictly increasing")
        if lv.size > 1 and np.any(lv[1:] == lv[:-1]):
            raise ValueError("levels must alternate")
        object.__setattr__(self, "edges_t", t)
        object.__setattr__(self, "levels", lv)

    def __len__(self) -> int:
        return int(self.edges_t.size)

    @property
    def end_us(self) -> float:
        return float(self.edges_t[-1]) if self.edges_t.size else 0.0

    def level_at(self, t_us) -> np.ndarray:
        """LED level at the given times (OFF before the first edge)."""
        idx = np.searchsorted(self.edges_t, np.asarray(t_us, dtype=float), side="right") - 1
        return np.where(idx >= 0, self.levels[np.clip(idx, 0, None)], OFF).astype(np.int8)

    @classmethod
    def square_wave(cls, transition_hz: float, duration_us: float, t0_us: float = 0.0) -> "OnOffSchedule":
        """Alternate ON/OFF every ``1/transition_hz`` starting ON at ``t0_us``."""
        step = 1e6 / transition_hz
        n = int(math.floor(duration_us / step + 1e-9))
        t = t0_us + step * np.arange(n)
        return cls(transition_hz, t, (np.arange(n) % 2 == 0).astype(np.int8))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_us", "level"])
            for t, lv in zip(self.edges_t.tolist(), self.levels.tolist()):
                w.writerow([f"{t:.3f}", lv])

    @classmethod
    def read_csv(cls, path, carrier_hz: float) -> "OnOffSchedule":
        rows = list(csv.DictReader(open(path, newline="")))
        return cls(carrier_hz, np.array([float(r["t_us"]) for r in rows]),
                   np.array([int(r["level"]) for r in rows]))


@dataclass(frozen=True)
class FrameFormat:
    preamble: tuple = (1, 0) * 8
    sync: tuple = (0, 1, 1, 1, 1, 1, 1, 0)

    @property
    def header(self) -> tuple:
        return self.preamble + self.sync

    @staticmethod
    def frame(byte: int) -> tuple:
        return (0,) + tuple((byte >> i) & 1 for i in range(8)) + (1,)


def text_bits(text: bytes, fmt: FrameFormat = FrameFormat()) -> list[int]:
    bits = list(fmt.header)
    for b in text:
        bits.extend(fmt.frame(b))
    return bits


def encode(text: bytes, carrier_hz: float, fmt: FrameFormat = FrameFormat(),
           t0_us: float = 0.0) -> OnOffSchedule:
    """Manchester schedule for ``text``; the LED is OFF before and after."""
    if isinstance(text, str):
        text = text.encode()
    if not text:
        raise ValueError("cannot encode empty text")
    if not MIN_CARRIER_HZ <= carrier_hz <= MAX_CARRIER_HZ:
        raise ValueError(f"carrier_hz {carrier_hz} outside [{MIN_CARRIER_HZ}, {MAX_CARRIER_HZ}]")
    bits = text_bits(text, fmt)
    half = np.empty(2 * len(bits), dtype=np.int8)
    b = np.asarray(bits, dtype=np.int8)
    half[0::2] = 1 - b
    half[1::2] = b
    prev = np.concatenate([[OFF], half[:-1]])
    change = np.flatnonzero(half != prev)
    period = 1e6 / carrier_hz
    t = t0_us + change * (period / 2)
    levels = half[change]
    if half[-1] == ON:
        t = np.append(t, t0_us + len(half) * period / 2)
        levels = np.append(levels, OFF)
    return OnOffSchedule(carrier_hz, t, levels, tuple(bits))


def ideal_events(schedule: OnOffSchedule, per_edge: int = 10, x: int = 10, y: int = 10) -> np.ndarray:
    """Noise-free channel: ``per_edge`` co-located events at every edge."""
    t = np.repeat(np.floor(schedule.edges_t).astype(np.int64), per_edge)
    p = np.repeat(np.where(schedule.levels == ON, 1, -1), per_edge)
    n = t.size
    return make_events(t, np.full(n, x), np.full(n, y), p)


# ---------------------------------------------------------------------------
# continuous-time signal
# ---------------------------------------------------------------------------

def default_tau(carrier_hz: float) -> float:
    return 1.0 / (4.0 * carrier_hz)


class SignalReconstructor:
    """``s <- s * exp(-dt / tau) + p`` per event, evaluated blockwise with numpy."""

    _MAX_SPAN = 600.0   # block length in units of tau, keeps exp() finite

    def __init__(self, tau_s: float):
        if not tau_s > 0:
            raise ValueError("decay tau must be positive")
        self.tau_us = tau_s * 1e6
        self.s = 0.0
        self.t = -math.inf

    def feed(self, t_us, p) -> np.ndarray:
        t = np.asarray(t_us, dtype=float)
        p = np.asarray(p, dtype=float)
        out = np.empty(t.size)
        if t.size == 0:
            return out
        if t[0] < self.t or np.any(np.diff(t) < 0):
            raise ValueError("events must be time-sorted")
        tau = self.tau_us
        i, n = 0, t.size
        while i < n:
            j = int(np.searchsorted(t, t[i] + self._MAX_SPAN * tau, side="right"))
            x = (t[i:j] - t[i]) / tau
            base = self.s * math.exp(-(t[i] - self.t) / tau) if self.s else 0.0
            out[i:j] = np.exp(-x) * (base + np.cumsum(p[i:j] * np.exp(x)))
            self.s = float(out[j - 1])
            self.t = float(t[j - 1])
            i = j
        return out

    def value_at(self, t_us: float) -> float:
        return self.s * math.exp(-(t_us - self.t) / self.tau_us) if self.s else 0.0


def reconstruct_signal(events: np.ndarray, decay_tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Signal samples ``(t_us, s)`` at each event time, after that event is added."""
    r = SignalReconstructor(decay_tau)
    return events["t"].astype(float), r.feed(events["t"], events["p"])


@dataclass
class HysteresisDecoder:
    """Two-threshold comparator. HIGH needs ``s >= theta_hi``, LOW needs ``s <= theta_lo``."""

    decay_tau: float
    theta_hi: float = 3.0
    theta_lo: float = -3.0
    state: int = LOW
    s: float = 0.0

    def __post_init__(self):
        if not self.theta_hi > self.theta_lo:
            raise ValueError(f"theta_hi ({self.theta_hi}) must exceed theta_lo ({self.theta_lo})")

    @classmethod
    def for_carrier(cls, carrier_hz: float, theta_hi: float = 3.0, theta_lo: float = -3.0):
        return cls(default_tau(carrier_hz), theta_hi, theta_lo)

    def feed(self, t: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Consume signal samples, return the ``(t, level)`` transitions they cause."""
        if s.size == 0:
            return np.empty(0), np.empty(0, dtype=np.int8)
        mark = np.zeros(s.size, dtype=np.int8)
        mark[s >= self.theta_hi] = 1
        mark[s <= self.theta_lo] = -1
        # forward-fill the last decided level through the dead band
        idx = np.where(mark != 0, np.arange(s.size), -1)
        np.maximum.accumulate(idx, out=idx)
        prev = 1 if self.state == HIGH else -1
        filled = np.where(idx >= 0, mark[np.clip(idx, 0, None)], prev)
        before = np.concatenate([[prev], filled[:-1]])
        change = np.flatnonzero(filled != before)
        self.state = HIGH if filled[-1] == 1 else LOW
        self.s = float(s[-1])
        return t[change], (filled[change] == 1).astype(np.int8)


def hysteresis_bits(signal: tuple[np.ndarray, np.ndarray], d: HysteresisDecoder,
                    carrier_hz: Optional[float] = None) -> list[tuple[float, int]]:
    t, s = signal
    tt, lv = d.feed(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    return list(zip(tt.tolist(), lv.tolist()))


def calibrate_thresholds(t_us: np.ndarray, s: np.ndarray, carrier_hz: float,
                         n_bits: int = 16) -> tuple[float, float]:
    """Set thresholds to +-0.5 x the median half-bit peak |s| over the preamble."""
    if s.size == 0:
        raise ValueError("no samples to calibrate on")
    half = 0.5e6 / carrier_hz
    rel = t_us - t_us[0]
    keep = rel < n_bits * 2 * half
    bins = (rel[keep] // half).astype(np.int64)
    peaks = np.zeros(int(bins.max()) + 1)
    np.maximum.at(peaks, bins, np.abs(s[keep]))
    amp = float(np.median(peaks[peaks > 0])) if np.any(peaks > 0) else 0.0
    if amp <= 0:
        raise ValueError("preamble carries no signal")
    return 0.5 * amp, -0.5 * amp


class StreamDecoder:
    """Incremental receiver: events in, level transitions accumulated.

    With ``auto_threshold`` the first preamble's worth of samples is held back
    until the thresholds have been calibrated on it.
    """

    def __init__(self, carrier_hz: float, theta_hi: float = 3.0, theta_lo: float = -3.0,
                 auto_threshold: bool = False, decay_tau: Optional[float] = None):
        self.carrier_hz = carrier_hz
        tau = decay_tau if decay_tau is not None else default_tau(carrier_hz)
        self.signal = SignalReconstructor(tau)
        self.hyst = HysteresisDecoder(tau, theta_hi, theta_lo)
        self.auto = auto_threshold
        self._held: list[tuple[np.ndarray, np.ndarray]] = []
        self._t: list[np.ndarray] = []
        self._lv: list[np.ndarray] = []
        self.n_events = 0
        self.last_t = -math.inf

    def feed(self, events: np.ndarray) -> None:
        if events.size == 0:
            return
        if int(events["t"][0]) < self.last_t:
            raise ValueError("decoder received an event older than one already delivered")
        self.last_t = int(events["t"][-1])
        self.n_events += int(events.size)
        t = events["t"].astype(float)
        s = self.signal.feed(t, events["p"])
        if self.auto:
            self._held.append((t, s))
            tt = np.concatenate([h[0] for h in self._held])
            if tt[-1] - tt[0] < 16 * 1e6 / self.carrier_hz:
                return
            ss = np.concatenate([h[1] for h in self._held])
            self.hyst.theta_hi, self.hyst.theta_lo = calibrate_thresholds(tt, ss, self.carrier_hz)
            self.auto = False
            self._held = []
            t, s = tt, ss
        tt, lv = self.hyst.feed(t, s)
        if tt.size:
            self._t.append(tt)
            self._lv.append(lv)

    def flush(self) -> None:
        if self._held:
            tt = np.concatenate([h[0] for h in self._held])
            ss = np.concatenate([h[1] for h in self._held])
            self._held = []
            self.auto = False
            tr, lv = self.hyst.feed(tt, ss)
            if tr.size:
                self._t.append(tr)
                self._lv.append(lv)

    @property
    def transitions(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._t:
            return np.empty(0), np.empty(0, dtype=np.int8)
        return np.concatenate(self._t), np.concatenate(self._lv)

    def decode(self, fmt: FrameFormat = FrameFormat()) -> "DecodeResult":
        self.flush()
        return frame_decode(self.transitions, fmt, self.carrier_hz)


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------

class DecodeResult(NamedTuple):
    data: bytes
    word_confidence: list
    flagged: list            # byte offsets replaced by the substitution marker
    bit_period_us: float
    diagnostic: str = ""


def _as_arrays(transitions):
    if isinstance(transitions, tuple) and len(transitions) == 2 and isinstance(transitions[0], np.ndarray):
        return np.asarray(transitions[0], dtype=float), np.asarray(transitions[1], dtype=np.int8)
    if len(transitions) == 0:
        return np.empty(0), np.empty(0, dtype=np.int8)
    arr = np.asarray(transitions, dtype=float)
    return arr[:, 0], arr[:, 1].astype(np.int8)


def recover_bit_period(t: np.ndarray, carrier_hz: float, n_preamble: int = 16) -> float:
    """Median spacing of the first transitions, falling back to nominal if implausible."""
    nominal = 1e6 / carrier_hz
    if t.size < 3:
        return nominal
    med = float(np.median(np.diff(t[: n_preamble])))
    return med if abs(med - nominal) <= 0.2 * nominal else nominal


def read_bits(t: np.ndarray, lv: np.ndarray, period: float, window: float = 0.3) -> list:
    """Walk the mid-bit grid from the first transition; None marks a missing bit."""
    bits: list = []
    if t.size == 0:
        return bits
    half_win = window * period
    expected = float(t[0])
    last = float(t[-1])
    while expected <= last + half_win:
        lo = int(np.searchsorted(t, expected - half_win, side="left"))
        hi = int(np.searchsorted(t, expected + half_win, side="right"))
        if hi > lo:
            k = lo + int(np.argmin(np.abs(t[lo:hi] - expected)))
            bits.append(int(lv[k]))
            expected = float(t[k]) + period
        else:
            bits.append(None)
            expected += period
    return bits


def find_sync(bits: Sequence, fmt: FrameFormat = FrameFormat()) -> int:
    """Index just past the first sync word preceded by alternating preamble bits, or -1."""
    sync = list(fmt.sync)
    n = len(sync)
    for i in range(2, len(bits) - n + 1):
        if bits[i - 2] == 1 and bits[i - 1] == 0 and list(bits[i:i + n]) == sync:
            return i + n
    return -1


def _word_confidence(data: bytes, flagged: set) -> list:
    conf, start = [], None
    for i in range(len(data) + 1):
        space = i == len(data) or chr(data[i]).isspace()
        if not space and start is None:
            start = i
        elif space and start is not None:
            bad = sum(1 for j in range(start, i) if j in flagged)
            conf.append(1.0 - bad / (i - start))
            start = None
    return conf


def frame_decode(transitions, fmt: FrameFormat = FrameFormat(), carrier_hz: float = 1000.0) -> DecodeResult:
    t, lv = _as_arrays(transitions)
    period = recover_bit_period(t, carrier_hz, len(fmt.preamble))
    bits = read_bits(t, lv, period)
    start = find_sync(bits, fmt)
    if start < 0:
        return DecodeResult(b"", [], [], period, "no sync word found")
    out = bytearray()
    flagged = []
    frames = [bits[i:i + 10] for i in range(start, len(bits) - 9, 10)]
    # frames that are pure erasure after the signal ends carry nothing
    while frames and all(b is None for b in frames[-1]):
        frames.pop()
    for fr in frames:
        if None in fr or fr[0] != 0 or fr[9] != 1:
            flagged.append(len(out))
            out.append(SUBSTITUTE)
        else:
            out.append(sum(b << i for i, b in enumerate(fr[1:9])))
    data = bytes(out)
    return DecodeResult(data, _word_confidence(data, set(flagged)), flagged, period)


# ---------------------------------------------------------------------------
# accuracy
# ---------------------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length (bit-parallel, Hyyro 2004)."""
    if not a or not b:
        return 0
    masks: dict = {}
    for i, tok in enumerate(a):
        masks[tok] = masks.get(tok, 0) | (1 << i)
    full = (1 << len(a)) - 1
    v = full
    for tok in b:
        u = v & masks.get(tok, 0)
        v = ((v + u) | (v - u)) & full
    return len(a) - bin(v).count("1")


def _tokens(s) -> list:
    if isinstance(s, (bytes, bytearray)):
        return bytes(s).split()
    return s.split()


def word_accuracy(decoded, reference) -> float:
    """Fraction of reference words recovered, after LCS alignment of word sequences."""
    ref = _tokens(reference)
    if not ref:
        raise ValueError("reference must contain at least one word")
    return lcs_length(ref, _tokens(decoded)) / len(ref)


def char_accuracy(decoded, reference) -> float:
    if not reference:
        raise ValueError("reference must be nonempty")
    return lcs_length(list(reference), list(decoded)) / len(reference)


def word_alignment(decoded, reference) -> list[tuple[int, object, int]]:
    """Per reference word: (index, word, 1 if matched in an LCS alignment else 0)."""
    ref, dec = _tokens(reference), _tokens(decoded)
    n, m = len(ref), len(dec)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, nxt = table[i], table[i + 1]
        for j in range(m - 1, -1, -1):
            row[j] = nxt[j + 1] + 1 if ref[i] == dec[j] else max(nxt[j], row[j + 1])
    matched = [0] * n
    i = j = 0
    while i < n and j < m:
        if ref[i] == dec[j]:
            matched[i] = 1
            i += 1
            j += 1
        elif table[i + 1][j] >= table[i][j + 1]:
            i += 1
        else:
            j += 1
    return [(k, ref[k], matched[k]) for k in range(n)]


def _printable(word) -> str:
    """Words as text with control characters shown as ``\\xNN`` escapes."""
    text = word.decode("utf-8", "backslashreplace") if isinstance(word, (bytes, bytearray)) else str(word)
    return "".join(c if c.isprintable() else f"\\x{ord(c):02x}" for c in text)


def write_words_csv(path, decoded, reference) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "word", "correct"])
        for k, word, ok in word_alignment(decoded, reference):
            w.writerow([k, _printable(word), ok])
