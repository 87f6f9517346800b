"""Event types, fixed-window packetization, SPSC ring buffers and stream I/O.

A stream of events is held as a numpy structured array with dtype
:data:`EVENT_DTYPE` (integer microsecond timestamps, pixel coordinates and a
signed polarity). Single events can be represented by :class:`Event`.
"""
from __future__ import annotations

import csv
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np

EVENT_DTYPE = np.dtype([("t", "<i8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
# packed on-disk layout for .evb files: u64 t_us, u16 x, u16 y, i8 p
EVB_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])

DEFAULT_WINDOW_US = 4000
DEFAULT_RING_CAPACITY = 64


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def make_events(t, x, y, p) -> np.ndarray:
    """Build an event array from column sequences, rejecting impossible values."""
    t = np.asarray(t, dtype=np.int64)
    x, y, p = np.asarray(x), np.asarray(y), np.asarray(p)
    if x.size and (x.min() < 0 or y.min() < 0):
        raise ValueError("event coordinates must be non-negative")
    if p.size and not np.all((p == 1) | (p == -1)):
        raise ValueError("event polarity must be +1 or -1")
    out = np.empty(t.shape[0], dtype=EVENT_DTYPE)
    out["t"] = t
    out["x"] = x
    out["y"] = y
    out["p"] = p
    return out


def empty_events() -> np.ndarray:
    return np.empty(0, dtype=EVENT_DTYPE)


def validate_events(events: np.ndarray, width: Optional[int] = None,
                    height: Optional[int] = None) -> None:
    """Raise ValueError if polarities or coordinates break the event invariants."""
    if events.dtype != EVENT_DTYPE:
        raise ValueError(f"expected dtype {EVENT_DTYPE}, got {events.dtype}")
    if events.size == 0:
        return
    bad = (events["p"] != 1) & (events["p"] != -1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"event {i} has polarity {int(events['p'][i])}, expected +1 or -1")
    if width is not None and int(events["x"].max()) >= width:
        raise ValueError(f"event x coordinate {int(events['x'].max())} outside sensor width {width}")
    if height is not None and int(events["y"].max()) >= height:
        raise ValueError(f"event y coordinate {int(events['y'].max())} outside sensor height {height}")


@dataclass(frozen=True)
class EventPacket:
    """Events with ``t_start <= t < t_end``, in arrival order."""

    t_start: int
    t_end: int
    events: np.ndarray = field(default_factory=empty_events, compare=False)

    def __len__(self) -> int:
        return int(self.events.size)

    @property
    def duration_us(self) -> int:
        return self.t_end - self.t_start

    def with_events(self, events: np.ndarray) -> "EventPacket":
        return EventPacket(self.t_start, self.t_end, events)

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in self.events.tolist():
            yield Event(t, x, y, p)


def packetize(events: np.ndarray, window_us: int = DEFAULT_WINDOW_US) -> list[EventPacket]:
    """Split a time-sorted stream into absolute-time-aligned windows.

    The first packet starts at the first event's timestamp floored to a window
    boundary; windows without events are still emitted so downstream stages
    see the passage of time.
    """
    if window_us <= 0:
        raise ValueError(f"window_us must be positive, got {window_us}")
    if events.size == 0:
        return []
    t = events["t"]
    if np.any(np.diff(t) < 0):
        i = int(np.flatnonzero(np.diff(t) < 0)[0])
        raise ValueError(
            f"event stream is not time-sorted: t[{i}]={int(t[i])} > t[{i + 1}]={int(t[i + 1])}")
    first = (int(t[0]) // window_us) * window_us
    n_windows = (int(t[-1]) - first) // window_us + 1
    bounds = first + window_us * np.arange(n_windows + 1, dtype=np.int64)
    cuts = np.searchsorted(t, bounds, side="left")
    return [EventPacket(int(bounds[k]), int(bounds[k + 1]), events[cuts[k]:cuts[k + 1]])
            for k in range(n_windows)]


class RingBuffer:
    """Bounded single-producer/single-consumer FIFO that drops the oldest item.

    ``push`` never blocks; when the buffer is full the oldest retained item is
    discarded and ``overflow`` is incremented. The lock only guards the short
    critical sections, since drop-oldest lets the producer touch the read end.
    """

    def __init__(self, capacity: int = DEFAULT_RING_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._items: deque = deque()
        self._lock = threading.Lock()
        self.overflow = 0
        self.pushed = 0
        self.popped = 0

    def push(self, item) -> None:
        with self._lock:
            if len(self._items) == self.capacity:
                self._items.popleft()
                self.overflow += 1
            self._items.append(item)
            self.pushed += 1

    def pop(self):
        """Return the oldest item, or None when empty."""
        with self._lock:
            if not self._items:
                return None
            self.popped += 1
            return self._items.popleft()

    def __len__(self) -> int:
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) >= self.capacity


# ---------------------------------------------------------------------------
# stream files
# ---------------------------------------------------------------------------

CSV_HEADER = ("t_us", "x", "y", "p")


def write_events(path, events: np.ndarray) -> None:
    """Write events as CSV, or packed binary when the name ends in ``.evb``."""
    path = Path(path)
    if path.suffix == ".evb":
        packed = np.empty(events.size, dtype=EVB_DTYPE)
        for name in ("t", "x", "y", "p"):
            packed[name] = events[name]
        path.write_bytes(packed.tobytes())
        return
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        if events.size:
            cols = np.column_stack([events["t"], events["x"], events["y"], events["p"]])
            np.savetxt(fh, cols, fmt="%d", delimiter=",")


def read_events(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".evb":
        raw = path.read_bytes()
        if len(raw) % EVB_DTYPE.itemsize:
            raise ValueError(f"{path}: size {len(raw)} is not a multiple of {EVB_DTYPE.itemsize}")
        packed = np.frombuffer(raw, dtype=EVB_DTYPE)
        return make_events(packed["t"].astype(np.int64), packed["x"], packed["y"], packed["p"])
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        data = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
    if data.size == 0:
        return empty_events()
    return make_events(data[:, 0], data[:, 1], data[:, 2], data[:, 3])
