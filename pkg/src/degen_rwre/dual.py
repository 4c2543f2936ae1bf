"""The dual walk as a time-changed discrete skeleton.

The walk runs in reversed environment time: at walk time ``s`` it sees the
conductances at environment time ``anchor - s``.  A skeleton is a simple
random walk ``Z`` plus rate-1 Poisson arrivals ``tau``; the clock ``A``
advances with slope ``2 b`` of the current site (plus ``delta`` in the
perturbed scheme) and ``Y_s = Z_{N(A(s))}``.  On piecewise-constant
environments every clock segment is linear, so the clock is solved exactly by
inverting cumulative conductances.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _clock
from .errors import BoundaryHit, StarvationError, ValidationError, WindowError
from .io import csv_text
from .kernel import kernel_iterate
from .paths import PathRecord
from .rng import generator, stream_seeds


class DualSkeleton:
    """Simple random walk positions and Poisson arrivals, drawn on demand.

    ``z_path[k]`` is the position after ``k`` steps and ``arrivals[k]`` is
    ``tau_k`` (with ``tau_0 = 0``).
    """

    def __init__(self, x0, rng=None, z_path=None, arrivals=None, chunk=64):
        self.x0 = int(x0)
        self._rng = rng
        self._chunk = chunk
        if z_path is None:
            self._z = np.array([self.x0], np.int64)
            self._tau = np.zeros(1)
        else:
            z = np.asarray(z_path, np.int64)
            tau = np.concatenate(([0.0], np.asarray(arrivals, float)))
            if z[0] != self.x0:
                raise ValidationError("z_path must start at x0")
            if np.any(np.abs(np.diff(z)) != 1):
                raise ValidationError("skeleton steps must be +-1")
            if np.any(np.diff(tau) <= 0):
                raise ValidationError("arrivals must increase strictly")
            n = min(len(z), len(tau))
            self._z, self._tau = z[:n], tau[:n]

    @classmethod
    def sample(cls, x0, seed, index=0):
        return cls(x0, generator(seed, "dual", index))

    def ensure(self, n):
        """Make at least ``n + 1`` skeleton steps available."""
        while len(self._z) <= n:
            if self._rng is None:
                raise ValidationError("fixed skeleton too short", needed=int(n) + 1,
                                      available=len(self._z))
            m = max(self._chunk, n + 1 - len(self._z))
            steps = np.where(self._rng.random(m) < 0.5, -1, 1)
            gaps = self._rng.exponential(1.0, m)
            self._z = np.concatenate((self._z, self._z[-1] + np.cumsum(steps)))
            self._tau = np.concatenate((self._tau, self._tau[-1] + np.cumsum(gaps)))

    def site(self, n):
        self.ensure(n)
        return int(self._z[n])

    def arrival(self, n):
        self.ensure(n)
        return float(self._tau[n])

    @property
    def z_path(self):
        return self._z

    @property
    def arrivals(self):
        return self._tau[1:]


@dataclass(frozen=True, eq=False)
class TimeChangeRecord:
    """Piecewise-linear clock: ``A(breakpoints[k]) = values[k]``, slope
    ``slopes[k]`` on ``[breakpoints[k], breakpoints[k+1]]``."""

    breakpoints: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    delta: float
    arrivals: np.ndarray
    sites: np.ndarray
    anchor: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        b, v = self.breakpoints, self.values
        if b[0] != 0.0 or v[0] != 0.0:
            raise AssertionError("clock must start at A(0) = 0")
        db = np.diff(b)
        dv = np.diff(v)
        if np.any(db <= 0):
            raise AssertionError("clock breakpoints must increase")
        tol = 1e-12 * max(1.0, float(v[-1]))
        if np.any(dv < -tol):
            raise AssertionError("clock must be non-decreasing")
        if np.any(dv > (2.0 + self.delta) * db + tol):
            raise AssertionError("clock violates the (2 + delta) Lipschitz bound")

    def A(self, t):
        return np.interp(t, self.breakpoints, self.values)

    def N(self, t):
        """Number of arrivals reached by the clock at time ``t`` (right-continuous)."""
        a = np.asarray(self.A(t))
        # an arrival that the clock meets exactly counts
        return np.searchsorted(self.arrivals, a * (1 + 1e-14) + 1e-300, side="right")

    def Y(self, t):
        return self.sites[np.minimum(self.N(t), len(self.sites) - 1)]

    def lipschitz_ratios(self):
        return np.diff(self.values) / np.diff(self.breakpoints)

    def to_csv(self):
        slopes = np.concatenate((self.slopes, [np.nan]))
        return csv_text(["t", "A", "slope"], [self.breakpoints, self.values, slopes])


def _reversed_horizon(env, anchor):
    _, _, t_lo, t_hi = env.view_bounds()
    if anchor > t_hi and env.time_period is None:
        raise WindowError("anchor after the window end", anchor=anchor, t_max=t_hi)
    return math.inf if env.time_period is not None else anchor - t_lo


def _site_slot(env, x, s, step):
    i = int(_clock.edge_slot(env.packed, int(x)))
    if i < 0:
        raise BoundaryHit("dual walk left the spatial window", site=int(x), time=float(s),
                          step=int(step))
    return i


def exact_time_change(env, skeleton, t_end, anchor=0.0):
    """Solve the clock exactly on ``[0, t_end]``."""
    t_end = float(t_end)
    H = _reversed_horizon(env, anchor)
    pk = env.packed
    bp, vals, slopes = [0.0], [0.0], []
    s = 0.0
    A = 0.0
    n = 0
    jumps = []
    while True:
        z = skeleton.site(n)
        i = _site_slot(env, z, s, n)
        tau_next = skeleton.arrival(n + 1)
        F0 = _clock.cumulative(pk, i, anchor - s)
        r = _clock.inverse_left(pk, i, F0 - 0.5 * (tau_next - A))
        s_new = anchor - r
        if s_new > H and H < t_end:
            F_end = _clock.cumulative(pk, i, anchor - H)
            raise StarvationError(
                "conductance exhausted before the clock reached the next arrival",
                site=int(z), arrival_index=n + 1, accumulated=float(A + 2 * (F0 - F_end)),
                needed=float(tau_next), reversed_horizon=float(H))
        stop = min(s_new, t_end)
        # breakpoints of this edge inside (s, stop), in walk time
        ks = anchor - env.knots_between(z, anchor - stop, anchor - s)[::-1]
        pts = np.concatenate((ks, [stop])) if stop > s else np.empty(0)
        Fs = _clock.cumulatives_at(pk, i, anchor - pts) if len(pts) else pts
        prev = s
        for u, Fu in zip(pts, Fs):
            a_u = A + 2.0 * (F0 - Fu)
            if u == stop and s_new <= t_end:
                a_u = tau_next
            b_mid = _clock.value(pk, i, anchor - 0.5 * (prev + u))
            slopes.append(2.0 * b_mid)
            bp.append(u)
            vals.append(min(a_u, tau_next))
            prev = u
        if s_new > t_end:
            break
        s, A, n = s_new, tau_next, n + 1
        jumps.append(s)
        if s >= t_end:
            break
    skeleton.ensure(n + 1)
    return TimeChangeRecord(np.array(bp), np.array(vals), np.array(slopes), 0.0,
                            skeleton.arrivals.copy(), skeleton.z_path.copy(), anchor,
                            {"jumps": n, "jump_times": jumps, "t_end": t_end})


def delta_time_change(env, skeleton, t_end, delta, anchor=0.0):
    """Perturbed clock with slope ``delta + 2 b``; never stalls."""
    delta = float(delta)
    if not delta > 0:
        raise ValidationError("delta must be positive", delta=delta)
    t_end = float(t_end)
    H = _reversed_horizon(env, anchor)
    if t_end > H:
        raise WindowError("window too short for the requested horizon",
                          t_end=t_end, reversed_horizon=H)
    pk = env.packed
    bp, vals, slopes = [0.0], [0.0], []
    s, A, n = 0.0, 0.0, 0
    while s < t_end:
        z = skeleton.site(n)
        i = _site_slot(env, z, s, n)
        tau_next = skeleton.arrival(n + 1)
        while s < t_end:
            # constancy piece of edge z in reversed time: (s, s_k]
            k = _clock.prev_knot(pk, i, anchor - s)
            # anchor - (anchor - k) can round back above k
            while anchor - k <= s:
                k = _clock.prev_knot(pk, i, k)
            s_k = min(anchor - k, t_end)
            slope = delta + 2.0 * _clock.value(pk, i, anchor - 0.5 * (s + s_k))
            need = (tau_next - A) / slope
            if s + need <= s_k:
                s_new = s + need
                if s_new > s:
                    bp.append(s_new)
                    vals.append(tau_next)
                    slopes.append(slope)
                s, A = s_new, tau_next
                n += 1
                break
            bp.append(s_k)
            A = A + slope * (s_k - s)
            vals.append(A)
            slopes.append(slope)
            s = s_k
    skeleton.ensure(n + 1)
    return TimeChangeRecord(np.array(bp), np.array(vals), np.array(slopes), delta,
                            skeleton.arrivals.copy(), skeleton.z_path.copy(), anchor,
                            {"jumps": n, "t_end": t_end})


def clock_identity_residual(env, record):
    """max_k |A(t_k) - int_0^{t_k} [delta + 2 b(Y_s)] ds| over the breakpoints.

    The integral is recomputed from exact cumulative conductances, following
    the walk position implied by the record.
    """
    worst = 0.0
    acc = 0.0
    t, v = record.breakpoints, record.values
    for a, c in zip(t[:-1], t[1:]):
        y = int(record.Y(0.5 * (a + c)))
        acc += record.delta * (c - a) + 2.0 * env.cumulative_conductance(
            y, record.anchor - c, record.anchor - a)
        worst = max(worst, abs(acc - v[np.searchsorted(t, c)]))
    return worst


def delta_monotonicity(records):
    """Compare clocks across a delta grid on the union of their breakpoints.

    ``decreasing_violations`` counts points where a larger delta gives a
    strictly larger clock; ``increasing_violations`` the reverse.
    """
    recs = sorted(records, key=lambda r: r.delta)
    ts = np.unique(np.concatenate([r.breakpoints for r in recs]))
    t_end = min(r.breakpoints[-1] for r in recs)
    ts = ts[ts <= t_end]
    vals = np.array([r.A(ts) for r in recs])
    d = np.diff(vals, axis=0)
    tol = 1e-12 * np.maximum(1.0, np.abs(vals[1:]))
    return {
        "deltas": [r.delta for r in recs],
        "decreasing_violations": int(np.sum(d > tol)),
        "increasing_violations": int(np.sum(d < -tol)),
        "n_points": int(len(ts)),
    }


def simulate_Y(env, x0, t_end, seed=0, index=0, anchor=0.0):
    """Dual walk path on ``[0, t_end]`` from the exact clock."""
    sk = DualSkeleton.sample(x0, seed, index)
    rec = exact_time_change(env, sk, t_end, anchor)
    n = rec.meta["jumps"]
    return PathRecord(0.0, int(x0), np.array(rec.meta["jump_times"]), sk.z_path[1:n + 1].copy(), float(t_end),
                      {"seed": int(seed), "tag": "dual", "index": int(index)})


@njit(cache=True)
def _dual_endpoints(pk, x0, anchor, t_end, seeds):
    n_paths = seeds.shape[0]
    pos = np.empty(n_paths, np.int64)
    jumps = np.empty(n_paths, np.int64)
    status = np.zeros(n_paths, np.int8)
    for p in range(n_paths):
        np.random.seed(seeds[p])
        z = x0
        s = 0.0
        n = 0
        while True:
            i = _clock.edge_slot(pk, z)
            if i < 0:
                status[p] = 1
                break
            e = np.random.exponential(1.0)
            f0 = _clock.cumulative(pk, i, anchor - s)
            r = _clock.inverse_left(pk, i, f0 - 0.5 * e)
            s_new = anchor - r
            if s_new > t_end:
                break
            s = s_new
            n += 1
            if np.random.random() < 0.5:
                z += 1
            else:
                z -= 1
        pos[p] = z
        jumps[p] = n
    return pos, jumps, status


def dual_endpoints(env, x0, t, n_paths, seed=0, anchor=0.0):
    """(Y_t, N(A(t))) for independent dual walks."""
    H = _reversed_horizon(env, anchor)
    if t > H:
        raise WindowError("window too short for the requested horizon", t=t, reversed_horizon=H)
    seeds = stream_seeds(seed, "dual", range(n_paths))
    pos, jumps, status = _dual_endpoints(env.packed, int(x0), float(anchor), float(t), seeds)
    if status.any():
        k = int(np.argmax(status))
        raise BoundaryHit("dual walk left the spatial window", path=k, n_hits=int(status.sum()))
    return pos, jumps


def validate_dual_law(env, x0, t, n_mc, n_kernel, seed=0, anchor=0.0, h=0.25):
    """Total variation between the MC law of (Y_t; N < n) and K_n(anchor, x0; anchor - t, .).

    The cell ``N >= n`` carries the missing kernel mass.  The MC standard
    error is ``0.5 * sum sqrt(p (1 - p) / n_mc)`` over all cells.
    """
    tab = kernel_iterate(env, anchor, anchor - t, (x0, x0), n_max=int(n_kernel), tol=0.0,
                         targets="domain", h=h)
    p = tab.values[0]
    sites = tab.targets
    p_rest = max(0.0, 1.0 - p.sum())
    pos, jumps = dual_endpoints(env, x0, t, n_mc, seed, anchor)
    keep = jumps < n_kernel
    idx = np.searchsorted(sites, pos[keep])
    if np.any(idx >= len(sites)) or np.any(sites[np.minimum(idx, len(sites) - 1)] != pos[keep]):
        raise WindowError("Monte Carlo endpoint outside kernel domain")
    counts = np.bincount(idx, minlength=len(sites)).astype(float)
    q = np.concatenate((counts, [np.sum(~keep)])) / n_mc
    pp = np.concatenate((p, [p_rest]))
    tv = 0.5 * float(np.abs(q - pp).sum())
    sd = np.sqrt(pp * (1 - pp) / n_mc)
    se = 0.5 * float(sd.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, (q - pp) / sd, 0.0)
    return {
        "tv": tv, "mc_se": se, "ratio": tv / se if se > 0 else (0.0 if tv == 0 else math.inf),
        "pass": bool(tv <= 3 * se) if se > 0 else tv < 1e-12,
        "max_abs_z": float(np.max(np.abs(z))), "sites": sites.tolist(),
        "kernel": pp.tolist(), "empirical": q.tolist(), "z": z.tolist(),
        "n_mc": int(n_mc), "n_kernel": int(n_kernel), "t": float(t),
        "kernel_mass_outside": p_rest,
    }
