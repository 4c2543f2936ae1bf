"""Forward walk with conductance-driven rates, sampled by Poisson thinning.

Candidate times come from a rate-2 Poisson clock.  At a candidate at time
``t`` and site ``x`` the walk steps right with probability ``b_t(x) / 2`` and
left with probability ``b_t(x - 1) / 2``.  Whenever both incident edges are
closed the clock is restarted at the next breakpoint of either edge, which is
exact by memorylessness and avoids burning candidates in long closed
stretches.

Two compiled kernels share that loop: one reads a stored environment, the
other generates renewal edges lazily per path (used for the heavy-tailed
experiments, where a stored window would be enormous).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _clock
from .errors import BoundaryHit, ValidationError, WindowError
from .io import csv_text
from .paths import PathRecord
from .rng import stream_seeds

OK, HIT, FULL = 0, 1, 2


@njit(cache=True)
def _walk(pk, x0, t0, t_end, obs, record, buf_t, buf_x, out_pos, out_max):
    """One path. Returns (status, n_events, time of last event)."""
    x = x0
    t = t0
    k = 0
    n_obs = obs.shape[0]
    run = 0
    n_ev = 0
    while True:
        ir = _clock.edge_slot(pk, x)
        il = _clock.edge_slot(pk, x - 1)
        if ir < 0 or il < 0:
            while k < n_obs:
                out_pos[k] = x
                out_max[k] = run
                k += 1
            return HIT, n_ev, t
        br = _clock.value(pk, ir, t)
        bl = _clock.value(pk, il, t)
        if br <= 0.0 and bl <= 0.0:
            nxt = min(_clock.next_knot(pk, ir, t), _clock.next_knot(pk, il, t))
            if nxt >= t_end:
                break
            while k < n_obs and obs[k] < nxt:
                out_pos[k] = x
                out_max[k] = run
                k += 1
            t = nxt
            continue
        cand = t + np.random.exponential(0.5)
        if cand > t_end:
            break
        while k < n_obs and obs[k] < cand:
            out_pos[k] = x
            out_max[k] = run
            k += 1
        t = cand
        # the edges may have switched between t and cand
        br = _clock.value(pk, ir, t)
        bl = _clock.value(pk, il, t)
        u = np.random.random() * 2.0
        if u < br:
            x += 1
        elif u < br + bl:
            x -= 1
        else:
            continue
        d = abs(x - x0)
        if d > run:
            run = d
        if record:
            if n_ev >= buf_t.shape[0]:
                return FULL, n_ev, t
            buf_t[n_ev] = t
            buf_x[n_ev] = x
        n_ev += 1
    while k < n_obs:
        out_pos[k] = x
        out_max[k] = run
        k += 1
    return OK, n_ev, t


@njit(cache=True)
def _ensemble(pk, x0, t0, t_end, obs, seeds):
    n = seeds.shape[0]
    m = obs.shape[0]
    pos = np.empty((n, m), np.int64)
    mx = np.empty((n, m), np.int64)
    status = np.zeros(n, np.int8)
    jumps = np.zeros(n, np.int64)
    dummy_t = np.empty(0)
    dummy_x = np.empty(0, np.int64)
    for p in range(n):
        np.random.seed(seeds[p])
        st, ne, _ = _walk(pk, x0, t0, t_end, obs, False, dummy_t, dummy_x, pos[p], mx[p])
        status[p] = st
        jumps[p] = ne
    return pos, mx, status, jumps


@njit(cache=True)
def _single(pk, x0, t0, t_end, seed, cap):
    np.random.seed(seed)
    buf_t = np.empty(cap)
    buf_x = np.empty(cap, np.int64)
    obs = np.empty(0)
    op = np.empty(0, np.int64)
    om = np.empty(0, np.int64)
    st, ne, t = _walk(pk, x0, t0, t_end, obs, True, buf_t, buf_x, op, om)
    return st, buf_t[:ne].copy(), buf_x[:ne].copy(), t


def _check_window(env, t0, t_end):
    if t_end < t0:
        raise ValidationError("need t_end >= t0", t0=t0, t_end=t_end)
    for t in (t0, t_end):
        if not env.covers(t):
            raise WindowError("time outside the environment window", t=float(t))


def simulate_X(env, x0, t0, t_end, seed=0, index=0):
    """Exact path on ``[t0, t_end]``; boundary hits raise with the partial path."""
    t0, t_end = float(t0), float(t_end)
    _check_window(env, t0, t_end)
    s = int(stream_seeds(seed, "path", [index])[0])
    cap = max(1024, int(4 * (t_end - t0)) + 64)
    while True:
        st, times, xs, t_last = _single(env.packed, int(x0), t0, t_end, s, cap)
        if st != FULL:
            break
        cap *= 4
    provenance = {"seed": int(seed), "tag": "path", "index": int(index)}
    rec = PathRecord(t0, int(x0), times, xs, t_end, provenance)
    if st == HIT:
        raise BoundaryHit("walk reached the spatial edge of the window", path=rec,
                          time=float(t_last), index=int(index))
    return rec


@dataclass
class Ensemble:
    """Positions ``positions[p, k]`` of path ``p`` at ``times[k]`` and the running
    maximum of ``|X - x0|`` up to that time."""

    times: np.ndarray
    positions: np.ndarray
    running_max: np.ndarray
    jumps: np.ndarray
    x0: int
    t0: float
    meta: dict = field(default_factory=dict)

    def to_csv(self):
        n, m = self.positions.shape
        pid = np.repeat(np.arange(n), m)
        tk = np.tile(self.times, n)
        return csv_text(["path_id", "t_k", "X"], [pid, tk, self.positions.ravel()])


def ensemble_X(env, n_paths, times, seed=0, x0=0, t0=0.0, first_index=0,
               model=None, window=None, L=None, allow_hits=False):
    """Observe independent paths at ``times``.

    With ``model`` given (and ``env=None``) every path gets its own freshly
    generated environment (annealed ensemble); otherwise all paths share
    ``env`` (quenched).
    """
    times = np.asarray(sorted(times), float)
    if n_paths < 1:
        raise ValidationError("need n_paths >= 1")
    t_end = float(times[-1]) if len(times) else t0
    if env is None:
        if model is None:
            raise ValidationError("need an environment or a model")
        from .percolation import generate_environment
        parts = []
        for p in range(n_paths):
            env_seed = int(stream_seeds(seed, "sample", [first_index + p])[0])
            e = generate_environment(model, L, window, seed=env_seed)
            parts.append(ensemble_X(e, 1, times, seed, x0, t0, first_index + p))
        return Ensemble(times, np.vstack([q.positions for q in parts]),
                        np.vstack([q.running_max for q in parts]),
                        np.concatenate([q.jumps for q in parts]), int(x0), float(t0),
                        {"design": "annealed", "n_paths": n_paths})
    _check_window(env, t0, t_end)
    seeds = stream_seeds(seed, "path", range(first_index, first_index + n_paths))
    pos, mx, status, jumps = _ensemble(env.packed, int(x0), float(t0), t_end, times, seeds)
    hits = int(np.count_nonzero(status == HIT))
    if hits and not allow_hits:
        k = int(np.argmax(status == HIT))
        raise BoundaryHit("walk reached the spatial edge of the window",
                          path=first_index + k, n_hits=hits)
    return Ensemble(times, pos, mx, jumps, int(x0), float(t0),
                    {"design": "quenched", "n_paths": n_paths, "boundary_hits": hits,
                     "hit_mask": status == HIT})


def martingale_check(field_, ens, bias_field=None):
    """Ensemble mean of psi(t, X_t) - psi(t0, x0) with a 3-sigma band per time.

    ``bias_field`` (the same corrector at a smaller eps) gives a separate
    estimate of the eps-bias: the mean difference between the two fields
    along the same paths.
    """
    rows = []
    flagged = False
    base = field_.psi(ens.t0, ens.x0)
    for k, t in enumerate(ens.times):
        vals = np.array([field_.psi(t, int(x)) for x in ens.positions[:, k]]) - base
        n = len(vals)
        mean = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
        row = {"t": float(t), "mean": mean, "se": se, "inside": abs(mean) <= 3 * se}
        if bias_field is not None:
            b0 = bias_field.psi(ens.t0, ens.x0)
            other = np.array([bias_field.psi(t, int(x)) for x in ens.positions[:, k]]) - b0
            row["eps_bias"] = float(np.mean(vals - other))
        flagged = flagged or not row["inside"]
        rows.append(row)
    return {"rows": rows, "flagged": flagged}


# -- lazily generated renewal edges ---------------------------------------

OFF_EXP, OFF_PARETO, OFF_CONST = 0, 1, 2
STACK = 64


@njit(cache=True)
def _draw(kind, a, b):
    if kind == OFF_EXP:
        return np.random.exponential(1.0 / a)
    if kind == OFF_PARETO:
        return b * np.random.pareto(a)
    return a


@njit(cache=True)
def _edge_init(j, c, off, on, tfirst, depth, okind, oa, ob, on_c):
    off0 = _draw(okind, oa, ob)
    tau0 = -(off0 + on_c) * np.random.random()
    c[j] = tau0
    off[j] = off0
    on[j] = on_c
    tfirst[j] = max(0.0, tau0 + off0)
    depth[j] = 0


@njit(cache=True)
def _edge_advance(j, t, c, off, on, depth, sk, sg, okind, oa, ob, on_c, bridge, mean_cycle):
    """Move edge ``j`` forward until its current cycle contains ``t``."""
    while t >= c[j] + off[j] + on[j]:
        end = c[j] + off[j] + on[j]
        d = depth[j]
        if d > 0:
            k = sk[j, d - 1]
            g = sg[j, d - 1]
            blk_end = end + g + k * on_c
            if blk_end <= t:
                depth[j] = d - 1
                c[j] = blk_end
                off[j] = 0.0
                on[j] = 0.0
            elif k == 1:
                depth[j] = d - 1
                c[j] = end
                off[j] = g
                on[j] = on_c
            else:
                k1 = k // 2
                if okind == OFF_EXP:
                    g1 = g * np.random.beta(k1, k - k1)
                else:
                    g1 = g * k1 / k
                sk[j, d - 1] = k - k1
                sg[j, d - 1] = g - g1
                sk[j, d] = k1
                sg[j, d] = g1
                depth[j] = d + 1
        elif bridge and t - end > 32.0 * mean_cycle:
            k = np.int64((t - end) / mean_cycle)
            if okind == OFF_EXP:
                g = np.random.gamma(k, 1.0 / oa)
            else:
                g = k * oa
            sk[j, 0] = k
            sg[j, 0] = g
            depth[j] = 1
        else:
            c[j] = end
            off[j] = _draw(okind, oa, ob)
            on[j] = on_c


@njit(cache=True)
def _renewal_paths(seeds, obs, t_end, R, okind, oa, ob, on_c, bridge, mean_cycle):
    n = seeds.shape[0]
    m = obs.shape[0]
    size = 2 * R + 1
    c = np.zeros(size)
    off = np.zeros(size)
    on = np.zeros(size)
    tfirst = np.zeros(size)
    made = np.zeros(size, np.bool_)
    depth = np.zeros(size, np.int64)
    sk = np.zeros((size, STACK), np.int64)
    sg = np.zeros((size, STACK))
    touched = np.empty(size, np.int64)
    pos = np.zeros((n, m), np.int64)
    mx = np.zeros((n, m), np.int64)
    status = np.zeros(n, np.int8)
    early = np.zeros(n, np.int64)
    jumps = np.zeros(n, np.int64)
    first_on = np.empty(0)
    fo_list = []
    for p in range(n):
        np.random.seed(seeds[p])
        n_t = 0
        x = 0
        t = 0.0
        k = 0
        run = 0
        while True:
            jr = x + R
            jl = x - 1 + R
            if jl < 0 or jr >= size:
                status[p] = HIT
                break
            for j in (jr, jl):
                if not made[j]:
                    made[j] = True
                    touched[n_t] = j
                    n_t += 1
                    _edge_init(j, c, off, on, tfirst, depth, okind, oa, ob, on_c)
            _edge_advance(jr, t, c, off, on, depth, sk, sg, okind, oa, ob, on_c, bridge, mean_cycle)
            _edge_advance(jl, t, c, off, on, depth, sk, sg, okind, oa, ob, on_c, bridge, mean_cycle)
            open_r = t >= c[jr] + off[jr]
            open_l = t >= c[jl] + off[jl]
            if not open_r and not open_l:
                nxt = min(c[jr] + off[jr], c[jl] + off[jl])
                if nxt >= t_end:
                    break
                while k < m and obs[k] < nxt:
                    pos[p, k] = x
                    mx[p, k] = run
                    k += 1
                t = nxt
                continue
            cand = t + np.random.exponential(0.5)
            if cand > t_end:
                break
            while k < m and obs[k] < cand:
                pos[p, k] = x
                mx[p, k] = run
                k += 1
            t = cand
            _edge_advance(jr, t, c, off, on, depth, sk, sg, okind, oa, ob, on_c, bridge, mean_cycle)
            _edge_advance(jl, t, c, off, on, depth, sk, sg, okind, oa, ob, on_c, bridge, mean_cycle)
            u = np.random.random() * 2.0
            br = 1.0 if t >= c[jr] + off[jr] else 0.0
            bl = 1.0 if t >= c[jl] + off[jl] else 0.0
            if u < br:
                if t < tfirst[jr]:
                    early[p] += 1
                x += 1
            elif u < br + bl:
                if t < tfirst[jl]:
                    early[p] += 1
                x -= 1
            else:
                continue
            jumps[p] += 1
            d = abs(x)
            if d > run:
                run = d
        while k < m:
            pos[p, k] = x
            mx[p, k] = run
            k += 1
        for q in range(n_t):
            j = touched[q]
            fo_list.append(tfirst[j])
            made[j] = False
    first_on = np.array(fo_list)
    return pos, mx, status, early, jumps, first_on


def renewal_ensemble(off, on_length, n_paths, times, seed=0, first_index=0, reach=None):
    """Annealed ensemble on lazily generated renewal edges.

    Every edge alternates OFF periods drawn from ``off`` with ON periods of
    fixed length ``on_length``.  Cycle 0 is drawn from the cycle law itself
    and placed uniformly around time 0, so the first opening of an edge is
    ``max(0, off_0 - U (off_0 + on))``.  Each path sees a fresh environment.

    Returns an :class:`Ensemble` whose ``meta`` carries the number of
    crossings before an edge's first opening (always 0 for a correct
    sampler) and first-opening quantiles over the touched edges.
    """
    from .percolation import Constant, Exponential, Pareto

    times = np.asarray(sorted(times), float)
    t_end = float(times[-1])
    if isinstance(off, Exponential):
        kind, a, b, bridge = OFF_EXP, off.rate, 0.0, True
    elif isinstance(off, Pareto):
        kind, a, b, bridge = OFF_PARETO, off.tail_index, off.scale, False
    elif isinstance(off, Constant):
        kind, a, b, bridge = OFF_CONST, off.c, 0.0, True
    else:
        raise ValidationError("unsupported OFF law for the lazy sampler", law=type(off).__name__)
    mean_cycle = (off.mean if math.isfinite(off.mean) else 0.0) + float(on_length)
    if reach is None:
        reach = int(20 * math.sqrt(2 * t_end)) + 100
    seeds = stream_seeds(seed, "path", range(first_index, first_index + n_paths))
    pos, mx, status, early, jumps, fo = _renewal_paths(
        seeds, times, t_end, int(reach), kind, float(a), float(b), float(on_length),
        bridge, float(mean_cycle))
    if status.any():
        raise BoundaryHit("lazy window too narrow", n_hits=int(status.sum()), reach=int(reach))
    q = np.quantile(fo, [0.5, 0.9, 0.99, 1.0]) if len(fo) else np.zeros(4)
    return Ensemble(times, pos, mx, jumps, 0, 0.0, {
        "design": "annealed", "n_paths": n_paths, "early_crossings": int(early.sum()),
        "first_on_quantiles": {"q50": q[0], "q90": q[1], "q99": q[2], "max": q[3]},
        "edges_touched": int(len(fo)),
    })
