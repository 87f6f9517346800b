"""Grid-based activity filter that removes isolated background events."""
from __future__ import annotations

import numpy as np

from .events import EventPacket

DEFAULT_CELL_SIZE = 16
DEFAULT_ACTIVITY_THRESHOLD = 3


class GridFilter:
    """Keep events whose cell, or one of its 8 neighbours, is active in the packet.

    A cell is active when it holds at least ``activity_threshold`` events of
    the current packet. Counting happens before selection, so the result does
    not depend on event order. Counters are per packet and never carried over.
    """

    def __init__(self, width: int, height: int, cell_size: int = DEFAULT_CELL_SIZE,
                 activity_threshold: int = DEFAULT_ACTIVITY_THRESHOLD):
        if cell_size < 1:
            raise ValueError("cell_size must be >= 1")
        if activity_threshold < 1:
            raise ValueError("activity_threshold must be >= 1")
        self.width = width
        self.height = height
        self.cell_size = cell_size
        self.activity_threshold = activity_threshold
        self.ncols = -(-width // cell_size)
        self.nrows = -(-height // cell_size)
        self.ncells = self.ncols * self.nrows
        self.col_of_x = (np.arange(width) // cell_size).astype(np.int64)
        self.row_of_y = (np.arange(height) // cell_size).astype(np.int64) * self.ncols
        # neighbour table includes the cell itself; off-grid slots point at a
        # sentinel cell whose count is always zero
        rows, cols = np.divmod(np.arange(self.ncells), self.ncols)
        nb = np.full((self.ncells, 9), self.ncells, dtype=np.int64)
        k = 0
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = rows + dr, cols + dc
                ok = (r >= 0) & (r < self.nrows) & (c >= 0) & (c < self.ncols)
                nb[ok, k] = r[ok] * self.ncols + c[ok]
                k += 1
        self.neighbors = nb
        self.last_counts = np.zeros(self.ncells, dtype=np.int64)

    def cell_index(self, x, y) -> np.ndarray:
        return self.row_of_y[np.asarray(y, dtype=np.int64)] + self.col_of_x[np.asarray(x, dtype=np.int64)]

    def keep_mask(self, events: np.ndarray) -> np.ndarray:
        if events.size == 0:
            self.last_counts = np.zeros(self.ncells, dtype=np.int64)
            return np.zeros(0, dtype=bool)
        cells = self.cell_index(events["x"], events["y"])
        counts = np.bincount(cells, minlength=self.ncells + 1)
        self.last_counts = counts[: self.ncells]
        active = np.flatnonzero(counts[: self.ncells] >= self.activity_threshold)
        # the neighbour relation is symmetric, so dilating the few active
        # cells marks exactly the cells that have an active neighbour
        passing = np.zeros(self.ncells + 1, dtype=bool)
        passing[self.neighbors[active]] = True
        return passing[cells]

    def filter_packet(self, packet: EventPacket) -> EventPacket:
        return packet.with_events(packet.events[self.keep_mask(packet.events)])


def reduction_ratio(inp: EventPacket, out: EventPacket) -> float:
    return 0.0 if len(inp) == 0 else len(out) / len(inp)
