"""Càdlàg nearest-neighbour paths and their CSV export."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .io import csv_text


@dataclass(frozen=True, eq=False)
class PathRecord:
    """Path started at ``x0`` at time ``t0``; ``times[k]`` is the k-th jump and
    ``positions[k]`` the site occupied right after it."""

    t0: float
    x0: int
    times: np.ndarray
    positions: np.ndarray
    horizon: float
    seed: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, float)
        x = np.asarray(self.positions, np.int64)
        if t.shape != x.shape:
            raise ValidationError("times and positions differ in length")
        if len(t):
            if np.any(np.diff(t) <= 0) or t[0] <= self.t0 or t[-1] > self.horizon:
                raise ValidationError("event times must increase strictly inside (t0, horizon]")
            steps = np.diff(np.concatenate(([self.x0], x)))
            if np.any(np.abs(steps) != 1):
                raise ValidationError("consecutive positions must differ by one")
        t.flags.writeable = False
        x.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", x)

    @property
    def n_jumps(self):
        return len(self.times)

    def positions_at(self, ts):
        """Right-continuous positions at the given times."""
        ts = np.asarray(ts, float)
        k = np.searchsorted(self.times, ts, side="right")
        full = np.concatenate(([self.x0], self.positions))
        return full[k]

    def position_at(self, t):
        return int(self.positions_at([t])[0])

    def running_max_abs(self, ts):
        """max_{t0 <= s <= t} |X_s - x0| at each t in ``ts``."""
        full = np.abs(np.concatenate(([self.x0], self.positions)) - self.x0)
        run = np.maximum.accumulate(full)
        return run[np.searchsorted(self.times, np.asarray(ts, float), side="right")]

    def crossings(self):
        """(time, edge left endpoint, direction) of every jump."""
        prev = np.concatenate(([self.x0], self.positions[:-1]))
        step = self.positions - prev
        edge = np.minimum(prev, self.positions)
        return self.times, edge, step

    def check_feasible(self, env):
        """Every jump crosses an edge that is open at the jump time."""
        t, e, _ = self.crossings()
        for tk, ek in zip(t, e):
            if not env.conductance_at(tk, int(ek)) > 0:
                return False
        return True

    def csv_columns(self, path_id=0):
        t = np.concatenate(([self.t0], self.times))
        x = np.concatenate(([self.x0], self.positions))
        return [np.full(len(t), path_id), t, x]

    def to_csv(self, path_id=0):
        return csv_text(["path_id", "time", "position"], self.csv_columns(path_id))
