"""Compiled primitives over a packed piecewise-constant environment.

A packed environment is the tuple

    (knots, vals, cum, koff, x_min, n_edges, wrap_space, t_min, t_max, period,
     dt, dx)

where edge ``i`` owns ``knots[koff[i]:koff[i+1]]``.  ``vals[j]`` is the
conductance on ``[knots[j], knots[j+1])`` (the last slot of each edge repeats
the final value so that a query at the right end of the window is defined),
and ``cum[j]`` is the integral of the conductance from the edge's first knot
up to ``knots[j]``.  ``period > 0`` marks a time-periodic edge whose knots
cover exactly one period starting at ``t_min``.  ``(dt, dx)`` is a shift:
callers speak view coordinates and every primitive adds the offsets before
touching the stored arrays, so a shifted view never copies data.
"""

import numpy as np
from numba import njit

INF = np.inf


@njit(cache=True)
def edge_slot(pk, x):
    x_min = pk[4]
    n_edges = pk[5]
    i = x + pk[11] - x_min
    if pk[6]:
        return i % n_edges
    if i < 0 or i >= n_edges:
        return -1
    return i


@njit(cache=True)
def _wrap(pk, t):
    """Reduce ``t`` into the stored period. Returns (local time, period count)."""
    period = pk[9]
    t_min = pk[7]
    if period <= 0.0:
        return t, 0.0
    nper = np.floor((t - t_min) / period)
    tt = t - nper * period
    if tt >= t_min + period:
        tt -= period
        nper += 1.0
    elif tt < t_min:
        tt += period
        nper -= 1.0
    return tt, nper


@njit(cache=True)
def _locate(knots, lo, hi, tt, scale=0.0):
    """Piece containing ``tt``.  A time within a few ulps of ``scale`` below a
    knot counts as the knot itself, so that a period reduction that rounds
    down does not land in the previous piece."""
    j = lo + np.searchsorted(knots[lo:hi], tt, side="right") - 1
    if j < lo:
        j = lo
    if j > hi - 1:
        j = hi - 1
    if j + 1 <= hi - 1 and knots[j + 1] - tt <= 8e-16 * (scale + abs(tt) + 1.0):
        j += 1
    return j


@njit(cache=True)
def value(pk, i, t):
    knots = pk[0]
    koff = pk[3]
    lo = koff[i]
    hi = koff[i + 1]
    tt, _ = _wrap(pk, t + pk[10])
    return pk[1][_locate(knots, lo, hi, tt, abs(t) + abs(pk[10]))]


@njit(cache=True)
def cumulative(pk, i, t):
    """Integral of edge ``i`` from ``t_min`` to ``t`` (signed, periodic aware)."""
    knots = pk[0]
    vals = pk[1]
    cum = pk[2]
    koff = pk[3]
    lo = koff[i]
    hi = koff[i + 1]
    tt, nper = _wrap(pk, t + pk[10])
    j = _locate(knots, lo, hi, tt, abs(t) + abs(pk[10]))
    base = cum[j] + vals[j] * (tt - knots[j])
    if nper != 0.0:
        base += nper * cum[hi - 1]
    return base


@njit(cache=True)
def inverse_right(pk, i, level):
    """Smallest t with cumulative(t) >= level; inf when never reached."""
    knots = pk[0]
    vals = pk[1]
    cum = pk[2]
    koff = pk[3]
    lo = koff[i]
    hi = koff[i + 1]
    total = cum[hi - 1]
    period = pk[9]
    nper = 0.0
    rem = level
    if period > 0.0:
        if total <= 0.0:
            return INF if level > 0.0 else -INF
        nper = np.floor(level / total)
        rem = level - nper * total
        if rem <= 0.0:
            nper -= 1.0
            rem = total
    else:
        if level > total:
            return INF
        if level <= 0.0:
            return knots[lo] - pk[10]
    q = lo + np.searchsorted(cum[lo:hi], rem, side="left")
    if q <= lo:
        return knots[lo] + nper * period - pk[10]
    t = knots[q - 1] + (rem - cum[q - 1]) / vals[q - 1]
    if t > knots[q]:
        t = knots[q]
    return t + nper * period - pk[10]


@njit(cache=True)
def inverse_left(pk, i, level):
    """Largest t with cumulative(t) <= level; -inf when level is below the window."""
    knots = pk[0]
    vals = pk[1]
    cum = pk[2]
    koff = pk[3]
    lo = koff[i]
    hi = koff[i + 1]
    total = cum[hi - 1]
    period = pk[9]
    nper = 0.0
    rem = level
    if period > 0.0:
        if total <= 0.0:
            return INF if level >= 0.0 else -INF
        nper = np.floor(level / total)
        rem = level - nper * total
        if rem >= total:
            nper += 1.0
            rem -= total
        if rem < 0.0:
            rem = 0.0
    else:
        if level < 0.0:
            return -INF
        if level >= total:
            return knots[hi - 1] - pk[10]
    q = lo + np.searchsorted(cum[lo:hi], rem, side="right")
    if q > hi - 1:
        q = hi - 1
    t = knots[q - 1] + (rem - cum[q - 1]) / vals[q - 1]
    if t > knots[q]:
        t = knots[q]
    if t < knots[q - 1]:
        t = knots[q - 1]
    return t + nper * period - pk[10]


@njit(cache=True)
def next_knot(pk, i, t):
    """Smallest breakpoint strictly after ``t``; inf past a finite window."""
    knots = pk[0]
    koff = pk[3]
    lo = koff[i]
    hi = koff[i + 1]
    period = pk[9]
    tt, nper = _wrap(pk, t + pk[10])
    j = _locate(knots, lo, hi, tt, abs(t) + abs(pk[10]))
    # rounding in the period reduction can land just below a knot; step past it
    while True:
        if j + 1 <= hi - 1:
            r = knots[j + 1] + nper * period - pk[10]
        elif period > 0.0:
            j = lo
            nper += 1.0
            continue
        else:
            return INF
        if r > t:
            return r
        j += 1


@njit(cache=True)
def prev_knot(pk, i, t):
    """Largest breakpoint strictly before ``t``; -inf before a finite window."""
    knots = pk[0]
    koff = pk[3]
    lo = koff[i]
    hi = koff[i + 1]
    period = pk[9]
    tt, nper = _wrap(pk, t + pk[10])
    j = lo + np.searchsorted(knots[lo:hi], tt, side="left") - 1
    while True:
        if j >= lo:
            r = knots[j] + nper * period - pk[10]
        elif period > 0.0:
            j = hi - 2
            nper -= 1.0
            continue
        else:
            return -INF
        if r < t:
            return r
        j -= 1


@njit(cache=True)
def values_at(pk, i, ts):
    out = np.empty(ts.shape[0])
    for k in range(ts.shape[0]):
        out[k] = value(pk, i, ts[k])
    return out


@njit(cache=True)
def cumulatives_at(pk, i, ts):
    out = np.empty(ts.shape[0])
    for k in range(ts.shape[0]):
        out[k] = cumulative(pk, i, ts[k])
    return out
