"""Piecewise-constant dynamical conductance environments on the integer line.

Edge ``x`` joins sites ``x`` and ``x + 1``; its conductance path is stored as
breakpoints so every time integral is exact.  Windows are finite.  A window
may be declared spatially periodic (site indices wrap modulo the edge count)
and, independently, time periodic (the stored trajectory repeats with period
``t_max - t_min``).
"""

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _clock
from .errors import ValidationError, WindowError
from .io import dumps

SCHEMA_VERSION = 1


class _Unreached:
    """Sentinel for a unit accumulation that does not happen in-window."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "UNREACHED"

    def __bool__(self):
        return False


UNREACHED = _Unreached()


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EdgeTrajectory:
    """One edge's right-continuous piecewise-constant conductance path.

    ``values[k]`` holds on ``[jump_times[k-1], jump_times[k])`` with the
    window ends standing in for the missing neighbours.
    """

    jump_times: np.ndarray
    values: np.ndarray
    t_min: float
    t_max: float

    def __post_init__(self):
        jt = _frozen(self.jump_times)
        vals = _frozen(self.values)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "values", vals)
        t_min, t_max = float(self.t_min), float(self.t_max)
        object.__setattr__(self, "t_min", t_min)
        object.__setattr__(self, "t_max", t_max)
        if not (math.isfinite(t_min) and math.isfinite(t_max)) or t_max <= t_min:
            raise ValidationError("trajectory window must be finite with t_min < t_max",
                                  t_min=t_min, t_max=t_max)
        if jt.ndim != 1 or vals.ndim != 1 or len(vals) != len(jt) + 1:
            raise ValidationError("need exactly one value per inter-jump interval",
                                  n_jumps=int(jt.size), n_values=int(vals.size))
        if len(jt) and (np.any(np.diff(jt) <= 0) or jt[0] <= t_min or jt[-1] >= t_max):
            raise ValidationError("jump times must be strictly increasing inside (t_min, t_max)")
        if np.any(~np.isfinite(vals)) or np.any(vals < 0) or np.any(vals > 1):
            raise ValidationError("conductances must lie in [0, 1]")

    @classmethod
    def constant(cls, value, t_min, t_max):
        return cls(np.empty(0), [value], t_min, t_max)

    @classmethod
    def from_pieces(cls, knots, values):
        """Build from full knots ``[t_min, ..., t_max]`` and one value per piece.

        Adjacent pieces with equal values are merged.
        """
        knots = np.asarray(knots, float)
        values = np.asarray(values, float)
        if len(knots) != len(values) + 1:
            raise ValidationError("knots must exceed values by one")
        keep = np.ones(len(values), bool)
        keep[1:] = values[1:] != values[:-1]
        return cls(knots[1:-1][keep[1:]], values[keep], knots[0], knots[-1])

    @property
    def knots(self):
        return np.concatenate(([self.t_min], self.jump_times, [self.t_max]))

    @property
    def origin_value(self):
        """Conductance on the interval containing time 0 (None if 0 is off-window)."""
        if not (self.t_min <= 0.0 <= self.t_max):
            return None
        return float(self.values[np.searchsorted(self.jump_times, 0.0, side="right")])

    def value_at(self, t):
        if not (self.t_min <= t <= self.t_max):
            raise WindowError("time outside trajectory window", t=float(t))
        return float(self.values[np.searchsorted(self.jump_times, t, side="right")])

    def integral(self, t0, t1):
        """Exact integral over ``[t0, t1]`` summed piece by piece in ascending time."""
        if not (self.t_min <= t0 <= t1 <= self.t_max):
            raise WindowError("integration interval outside trajectory window",
                              t0=float(t0), t1=float(t1))
        k = self.knots
        lo = np.searchsorted(k, t0, side="right") - 1
        hi = np.searchsorted(k, t1, side="left")
        pieces = []
        for j in range(lo, hi):
            a = max(k[j], t0)
            b = min(k[j + 1], t1)
            if b > a:
                pieces.append(self.values[j] * (b - a))
        return math.fsum(pieces)

    def to_dict(self, x):
        return {
            "x": int(x),
            "origin_value": self.origin_value,
            "jump_times": self.jump_times.tolist(),
            "values": self.values.tolist(),
        }


class _Queries:
    """Query surface shared by windows and shifted views.

    Subclasses provide ``packed`` (see ``_clock``) plus window metadata.
    """

    def _check(self, t, x):
        if not self.covers(t, x):
            raise WindowError(f"query (t={t!r}, x={x!r}) outside window", t=float(t), x=int(x))

    def _slot(self, x):
        return int(_clock.edge_slot(self.packed, int(x)))

    def covers(self, t, x=None):
        base, dt, dx = self._frame()
        if x is not None and not base.periodic:
            if not (base.x_min <= x + dx < base.x_max):
                return False
        if base.time_period is not None:
            return math.isfinite(t)
        return base.t_min <= t + dt <= base.t_max

    def conductance_at(self, t, x):
        """b_t(x), the conductance of edge (x, x+1) at time t; right-continuous."""
        self._check(t, x)
        return float(_clock.value(self.packed, self._slot(x), float(t)))

    def conductances(self, x, ts):
        ts = np.ascontiguousarray(ts, dtype=float)
        for t in (ts.min(initial=np.inf), ts.max(initial=-np.inf)):
            if np.isfinite(t):
                self._check(t, x)
        return _clock.values_at(self.packed, self._slot(x), ts)

    def cumulative(self, x, ts):
        """Antiderivative of b(x) at times ``ts`` (vectorised; zero at the base ``t_min``)."""
        ts = np.ascontiguousarray(ts, dtype=float)
        return _clock.cumulatives_at(self.packed, self._slot(x), ts)

    def cumulative_conductance(self, x, t0, t1):
        self._check(t0, x)
        self._check(t1, x)
        if t1 < t0:
            raise ValidationError("need t0 <= t1", t0=t0, t1=t1)
        base, dt, dx = self._frame()
        return _integral_periodic(base, self._slot(x), t0 + dt, t1 + dt)

    def knots_between(self, x, a, b):
        """Breakpoints of edge x strictly inside (a, b), ascending, view time."""
        base, dt, dx = self._frame()
        return _knots_between(base, self._slot(x), a + dt, b + dt) - dt

    def unit_accumulation_time(self, x, start=0.0):
        """First t >= start with one unit of conductance accrued, else UNREACHED."""
        self._check(start, x)
        i = self._slot(x)
        pk = self.packed
        level = _clock.cumulative(pk, i, float(start)) + 1.0
        t = _clock.inverse_right(pk, i, level)
        if not math.isfinite(t) or not self.covers(t, x):
            return UNREACHED
        return float(t)

    def shift(self, dt, dx):
        base, dt0, dx0 = self._frame()
        return ShiftView(base, dt0 + float(dt), dx0 + int(dx))

    def spatial_period(self):
        base = self._frame()[0]
        return base.n_edges if base.periodic else None

    def view_bounds(self):
        """(x_min, x_max, t_min, t_max) in view coordinates."""
        base, dt, dx = self._frame()
        return base.x_min - dx, base.x_max - dx, base.t_min - dt, base.t_max - dt


@dataclass(frozen=True, eq=False)
class EnvironmentWindow(_Queries):
    """Finite space-time block of edge trajectories.

    Parameters
    ----------
    x_min, x_max : int
        Edges ``x_min <= x < x_max`` are stored.
    t_min, t_max : float
        Every trajectory covers ``[t_min, t_max]``.
    edges : sequence of EdgeTrajectory
        Ordered by edge index.
    periodic : bool
        Wrap site indices modulo ``x_max - x_min``.
    time_period : float or None
        If set, equals ``t_max - t_min`` and trajectories repeat in time.
    """

    x_min: int
    x_max: int
    t_min: float
    t_max: float
    edges: tuple
    periodic: bool = False
    time_period: float = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        edges = self.edges
        if isinstance(edges, dict):
            edges = [edges[x] for x in range(self.x_min, self.x_max)]
        edges = tuple(edges)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "x_min", int(self.x_min))
        object.__setattr__(self, "x_max", int(self.x_max))
        object.__setattr__(self, "t_min", float(self.t_min))
        object.__setattr__(self, "t_max", float(self.t_max))
        if self.x_max <= self.x_min:
            raise ValidationError("window needs at least one edge")
        if len(edges) != self.x_max - self.x_min:
            raise ValidationError("edge count does not match [x_min, x_max)",
                                  n_edges=len(edges), x_min=self.x_min, x_max=self.x_max)
        for x, e in zip(range(self.x_min, self.x_max), edges):
            if not isinstance(e, EdgeTrajectory):
                raise ValidationError("edges must be EdgeTrajectory objects", x=x)
            if e.t_min > self.t_min or e.t_max < self.t_max:
                raise ValidationError("edge does not cover the window", x=x)
        if self.time_period is not None:
            p = float(self.time_period)
            object.__setattr__(self, "time_period", p)
            if not math.isclose(self.t_min + p, self.t_max, rel_tol=0, abs_tol=1e-12 * max(1, p)):
                raise ValidationError("time_period must equal t_max - t_min")

    # -- constructors -------------------------------------------------
    @classmethod
    def constant(cls, value, x_min, x_max, t_min, t_max, periodic=False, time_period=None):
        e = EdgeTrajectory.constant(value, t_min, t_max)
        return cls(x_min, x_max, t_min, t_max, [e] * (x_max - x_min), periodic, time_period,
                   {"generator": {"kind": "constant", "value": float(value)}})

    # -- internals ----------------------------------------------------
    def _frame(self):
        return self, 0.0, 0

    @property
    def n_edges(self):
        return self.x_max - self.x_min

    @cached_property
    def packed(self):
        knots, vals, cum, koff = [], [], [], [0]
        for e in self.edges:
            k = e.knots
            # clip to the window
            lo = np.searchsorted(k, self.t_min, side="right") - 1
            hi = np.searchsorted(k, self.t_max, side="left")
            kk = np.concatenate(([self.t_min], k[lo + 1:hi], [self.t_max]))
            vv = np.concatenate((e.values[lo:hi], [e.values[hi - 1]]))
            cc = np.zeros(len(kk))
            cc[1:] = np.cumsum(vv[:-1] * np.diff(kk))
            knots.append(kk)
            vals.append(vv)
            cum.append(cc)
            koff.append(koff[-1] + len(kk))
        return (
            _frozen(np.concatenate(knots)),
            _frozen(np.concatenate(vals)),
            _frozen(np.concatenate(cum)),
            _frozen(koff, np.int64),
            np.int64(self.x_min),
            np.int64(self.n_edges),
            bool(self.periodic),
            float(self.t_min),
            float(self.t_max),
            float(self.time_period or 0.0),
            0.0,
            np.int64(0),
        )

    def edge(self, x):
        i = self._slot(x)
        if i < 0:
            raise WindowError("edge outside window", x=int(x))
        return self.edges[i]

    # -- serialization ------------------------------------------------
    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "x_min": self.x_min,
            "x_max": self.x_max,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "periodic": bool(self.periodic),
            "time_period": self.time_period,
            "edges": [e.to_dict(x) for x, e in zip(range(self.x_min, self.x_max), self.edges)],
            "metadata": self.metadata,
        }

    def to_json(self):
        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError("unsupported environment schema version",
                                  schema_version=d.get("schema_version"))
        t_min, t_max = float(d["t_min"]), float(d["t_max"])
        by_x = {}
        for e in d["edges"]:
            by_x[int(e["x"])] = EdgeTrajectory(e["jump_times"], e["values"], t_min, t_max)
        edges = [by_x[x] for x in range(int(d["x_min"]), int(d["x_max"]))]
        return cls(int(d["x_min"]), int(d["x_max"]), t_min, t_max, edges,
                   bool(d.get("periodic", False)), d.get("time_period"), d.get("metadata", {}))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class ShiftView(_Queries):
    """Lazy space-time shift: queries at (s, y) read the base at (s + dt, y + dx)."""

    base: EnvironmentWindow
    dt: float
    dx: int

    def _frame(self):
        return self.base, self.dt, self.dx

    @cached_property
    def packed(self):
        pk = self.base.packed
        return pk[:10] + (float(self.dt), np.int64(self.dx))

    @property
    def periodic(self):
        return self.base.periodic

    @property
    def time_period(self):
        return self.base.time_period

    @property
    def metadata(self):
        return self.base.metadata


def _integral_periodic(base, i, a, b):
    """Exact integral of slot ``i`` over base-time [a, b] (periodic aware)."""
    pk = base.packed
    if base.time_period is None:
        return base.edges[i].integral(a, b)
    p = base.time_period
    # whole periods contribute the stored total
    total = pk[2][pk[3][i + 1] - 1]
    n_a = math.floor((a - base.t_min) / p)
    n_b = math.floor((b - base.t_min) / p)
    if n_a == n_b:
        e = base.edges[i]
        return e.integral(a - n_a * p, b - n_a * p)
    e = base.edges[i]
    head = e.integral(a - n_a * p, base.t_max)
    tail = e.integral(base.t_min, b - n_b * p)
    return math.fsum([head, (n_b - n_a - 1) * total, tail])


def _knots_between(base, i, a, b):
    pk = base.packed
    lo, hi = pk[3][i], pk[3][i + 1]
    k = pk[0][lo:hi]
    if base.time_period is None:
        return k[(k > a) & (k < b)]
    p = base.time_period
    n_a = math.floor((a - base.t_min) / p)
    n_b = math.floor((b - base.t_min) / p)
    inner = k[:-1]
    parts = [inner + n * p for n in range(n_a, n_b + 1)]
    out = np.concatenate(parts) if parts else np.empty(0)
    return out[(out > a) & (out < b)]


# -- module-level functional API ---------------------------------------

def conductance_at(env, t, x):
    return env.conductance_at(t, x)


def cumulative_conductance(env, x, t0, t1):
    return env.cumulative_conductance(x, t0, t1)


def unit_accumulation_time(env, x):
    return env.unit_accumulation_time(x)


def shift(env, dt, dx):
    return env.shift(dt, dx)
