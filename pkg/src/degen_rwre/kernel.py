"""Backward kernel recursion for the dual walk.

``K_n(s, x; t, y)`` is the probability that the dual walk started at site
``x`` at time ``s`` and run backward to time ``t <= s`` sits at ``y`` having
jumped fewer than ``n`` times.  It satisfies

    K_{n+1}(s,x;t,y) = exp(-2 B_x(t,s)) [x == y]
                       + int_t^s exp(-2 B_x(r,s)) b_r(x) sum_{z=+-1} K_n(r,x+z;t,y) dr

with ``B_x(r,s)`` the integral of ``b(x)`` over ``[r, s]`` and ``K_0 = 0``.
The integral is computed on panels whose ends include every conductance
breakpoint, so the conductance is constant inside each panel and the
integrand is smooth there; Chebyshev-Lobatto collocation integrates it to
near machine precision.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy import linalg, stats

from .errors import RangeError, ValidationError


@lru_cache(maxsize=None)
def _lobatto(m):
    """Chebyshev-Lobatto nodes on [-1, 1] and the indefinite integration matrix."""
    xi = -np.cos(np.pi * np.arange(m) / (m - 1))
    V = C.chebvander(xi, m - 1)
    Q = np.empty((m, m))
    for k in range(m):
        c = np.zeros(m)
        c[k] = 1.0
        Q[:, k] = C.chebval(xi, C.chebint(c, lbnd=-1))
    S = Q @ np.linalg.inv(V)
    S[0] = 0.0
    return xi, S


def panel_edges(env, sites, t, s, h):
    """Panel boundaries on [t, s]: all breakpoints of the listed edges, then
    subdivided so no panel exceeds ``h``."""
    pts = [np.array([t, s], float)]
    for x in np.unique(sites):
        pts.append(env.knots_between(int(x), t, s))
    e = np.unique(np.concatenate(pts))
    out = [e[:1]]
    for a, b in zip(e[:-1], e[1:]):
        k = max(1, int(math.ceil((b - a) / h)))
        out.append(a + (b - a) * np.arange(1, k + 1) / k)
    e = np.concatenate(out)
    e[-1] = s
    return e


@dataclass
class KernelTable:
    """``values[i, j] = K_n(s, sites[i]; t, targets[j])``.

    ``escape[i, j]`` bounds the mass that left the computational domain
    (zero for torus tables).  ``nodes``/``node_values`` hold the kernel at
    every collocation time when requested.
    """

    n: int
    s: float
    t: float
    sites: np.ndarray
    targets: np.ndarray
    values: np.ndarray
    escape: np.ndarray
    h: float
    scheme: str
    converged: bool
    last_increment: float
    torus: bool = False
    nodes: np.ndarray = None
    weights: np.ndarray = None
    node_values: np.ndarray = None
    history: list = field(default_factory=list)

    def value(self, x, y):
        i = int(np.searchsorted(self.sites, x))
        j = int(np.searchsorted(self.targets, y))
        if i >= len(self.sites) or self.sites[i] != x or j >= len(self.targets) or self.targets[j] != y:
            raise RangeError("site outside table", x=int(x), y=int(y))
        return float(self.values[i, j])

    def row(self, x):
        i = int(np.searchsorted(self.sites, x))
        if i >= len(self.sites) or self.sites[i] != x:
            raise RangeError("site outside table", x=int(x))
        return self.values[i]

    @property
    def row_sums(self):
        return self.values.sum(axis=1)

    def summary(self):
        return {
            "n": self.n, "s": self.s, "t": self.t, "h": self.h, "scheme": self.scheme,
            "converged": self.converged, "last_increment": self.last_increment,
            "sites": [int(self.sites[0]), int(self.sites[-1])],
            "targets": [int(self.targets[0]), int(self.targets[-1])],
            "max_escape": float(self.escape.max(initial=0.0)), "torus": self.torus,
        }


def _default_pad(s, t, n_max):
    # reaching distance d needs d jumps of a rate <= 2 clock
    d = int(stats.poisson.isf(1e-12, max(2.0 * (s - t), 1e-300))) + 2
    return max(1, min(d, n_max))


def kernel_iterate(env, s, t, site_range, n_max=200, h=0.25, order=10, tol=1e-12,
                   targets=None, pad=None, torus=False, escape_tol=1e-9,
                   keep_nodes=False, keep_history=False, chunk=16):
    """Iterate the kernel recursion on ``[t, s]``.

    Parameters
    ----------
    site_range : (int, int)
        Inclusive range of starting sites reported in the table.
    n_max : int
        Maximum number of iterations; ``tol=0`` forces exactly ``n_max``.
    h : float
        Maximum panel length.
    order : int
        Collocation points per panel.
    targets : sequence of int or "domain", optional
        Target sites ``y`` (default: the site range; ``"domain"`` takes every
        simulated site, so row sums see all the mass kept in the domain).
    pad : int, optional
        Extra sites simulated on each side of the range.  The default is a
        Poisson tail bound on the number of jumps, capped at ``n_max``.
    torus : bool
        On a spatially periodic environment, compute the kernel of the walk
        folded onto one period (sites are residues).
    """
    s = float(s)
    t = float(t)
    if s < t:
        raise ValidationError("need s >= t", s=s, t=t)
    if h <= 0:
        raise ValidationError("need h > 0", h=h)
    lo, hi = int(site_range[0]), int(site_range[1])
    if torus:
        L = env.spatial_period()
        if L is None:
            raise ValidationError("torus kernel needs a spatially periodic environment")
        dom = np.arange(lo, lo + L)
        lo, hi = lo, lo + L - 1
    else:
        if pad is None:
            pad = _default_pad(s, t, n_max)
        dom = np.arange(lo - pad, hi + pad + 1)
    for x in (dom[0], dom[-1]):
        for tt in (t, s):
            env._check(tt, int(x))
    X = len(dom)
    if targets is None:
        tg = np.arange(lo, hi + 1)
    elif isinstance(targets, str) and targets == "domain":
        tg = dom.copy()
    else:
        tg = np.asarray(sorted(targets), int)
    tg_idx = tg - dom[0]
    if torus:
        tg_idx = tg_idx % X
    elif np.any(tg_idx < 0) or np.any(tg_idx >= X):
        raise ValidationError("targets must lie inside the computational domain")

    xi, S = _lobatto(order)
    edges = panel_edges(env, dom, t, s, h)
    a, c = edges[:-1], edges[1:]
    P = len(a)
    half = 0.5 * (c - a)
    r = a[:, None] + half[:, None] * (1.0 + xi[None, :])           # (P, m)
    r[:, 0] = a
    r[:, -1] = c
    mid = 0.5 * (a + c)
    beta = np.stack([env.conductances(int(x), mid) for x in dom], axis=1)       # (P, X)
    F = np.stack([env.cumulative(int(x), r.ravel()).reshape(P, order) for x in dom], axis=-1)
    Ft = np.array([env.cumulative(int(x), np.array([t]))[0] for x in dom])
    E0 = np.exp(-2.0 * np.maximum(F - Ft[None, None, :], 0.0))           # (P, m, X)
    dr = r - a[:, None]
    D = np.exp(-2.0 * beta[:, None, :] * dr[:, :, None])                 # (P, m, X)
    W = beta[:, None, :] * np.exp(2.0 * beta[:, None, :] * dr[:, :, None])
    Sp = S[None, :, :] * half[:, None, None]                              # (P, m, m)

    values = np.zeros((len(np.arange(lo, hi + 1)), len(tg)))
    esc_out = np.zeros(len(np.arange(lo, hi + 1)))
    row_idx = np.arange(lo, hi + 1) - dom[0]
    n_done = 0
    converged = False
    last = 0.0
    history = []
    node_values = np.zeros((P, order, X, len(tg))) if keep_nodes else None

    # the escape ghost is appended as an extra target column
    cols = list(range(len(tg))) + ([] if torus else [-1])
    for c0 in range(0, len(cols), chunk):
        block = cols[c0:c0 + chunk]
        Y = len(block)
        diag = np.zeros((X, Y))
        for k, j in enumerate(block):
            if j >= 0:
                diag[tg_idx[j], k] = 1.0
        ghost = np.array([j < 0 for j in block])
        K = np.zeros((P, order, X, Y))
        hist_block = []
        conv = False
        inc = 0.0
        for n in range(n_max):
            g = np.zeros_like(K)
            if torus:
                g += np.roll(K, 1, axis=2) + np.roll(K, -1, axis=2)
            else:
                g[:, :, 1:, :] += K[:, :, :-1, :]
                g[:, :, :-1, :] += K[:, :, 1:, :]
                if n >= 1 and ghost.any():
                    g[:, :, 0, ghost] += 1.0
                    g[:, :, -1, ghost] += 1.0
            Lc = np.matmul(Sp, (W[:, :, :, None] * g).reshape(P, order, X * Y)).reshape(P, order, X, Y)
            Ia = np.zeros((X, Y))
            Knew = np.empty_like(K)
            for p in range(P):
                Knew[p] = D[p][:, :, None] * (Ia[None] + Lc[p])
                Ia = Knew[p, -1]
            Knew += E0[:, :, :, None] * diag[None, None, :, :]
            inc = float(np.max(np.abs(Knew - K)))
            K = Knew
            if keep_history:
                hist_block.append(K[-1, -1][row_idx].copy())
            if tol > 0 and inc < tol:
                conv = True
                n += 1
                break
        else:
            n = n_max
        n_done = max(n_done, n)
        converged = conv if c0 == 0 else (converged and conv)
        last = max(last, inc)
        final = K[-1, -1]
        for k, j in enumerate(block):
            if j >= 0:
                values[:, j] = final[row_idx, k]
                if keep_nodes:
                    node_values[:, :, :, j] = K[:, :, :, k]
            else:
                esc_out = final[row_idx, k]
        if keep_history:
            history.append((block, hist_block))

    if keep_history:
        hist = []
        for n in range(n_done):
            M = np.zeros_like(values)
            for block, hb in history:
                for k, j in enumerate(block):
                    if j >= 0:
                        M[:, j] = hb[min(n, len(hb) - 1)][:, k]
            hist.append(M)
        history = hist

    escape = np.broadcast_to(esc_out[:, None], values.shape).copy()
    if not torus and esc_out.max(initial=0.0) > escape_tol:
        raise RangeError(
            "kernel mass leaves the site range; enlarge pad",
            max_escape=float(esc_out.max()), pad=int(pad), suggested_pad=int(2 * pad + 2))
    table = KernelTable(
        n=int(n_done), s=s, t=t, sites=np.arange(lo, hi + 1), targets=tg, values=values,
        escape=escape, h=float(h), scheme=f"chebyshev-lobatto-{order}",
        converged=bool(converged), last_increment=last, torus=bool(torus),
        history=history if keep_history else [],
    )
    if keep_nodes:
        table.nodes = r
        # Clenshaw-Curtis weights of each panel are the last row of S
        table.weights = S[-1][None, :] * half[:, None]
        table.node_values = node_values[:, :, row_idx, :] if not torus else node_values
    return table


# -- generator actions --------------------------------------------------


def _site_conductances(env, xs, t):
    return np.array([env.conductance_at(t, int(x)) for x in xs])


def apply_L_plus(env, f, t, x_lo, wrap=False):
    """Adjoint generator ``(L+ f)(x) = b(x+1) f(x+1) + b(x-1) f(x-1) - 2 b(x) f(x)``.

    ``f[k]`` is the value at site ``x_lo + k``.  Without ``wrap`` the result
    covers the interior sites ``x_lo + 1 .. x_lo + len(f) - 2``; with
    ``wrap`` it covers all sites of one spatial period.
    """
    f = np.asarray(f, float)
    xs = x_lo + np.arange(len(f))
    bf = _site_conductances(env, xs, t) * f
    if wrap:
        if env.spatial_period() != len(f):
            raise ValidationError("wrap needs f over exactly one spatial period")
        return np.roll(bf, -1) + np.roll(bf, 1) - 2.0 * bf
    if len(f) < 3:
        raise ValidationError("f needs a margin of one site on each side")
    return bf[2:] + bf[:-2] - 2.0 * bf[1:-1]


def apply_L(env, f, t, x_lo, wrap=False):
    """Dual generator ``(L f)(x) = b(x) [f(x+1) + f(x-1) - 2 f(x)]``."""
    f = np.asarray(f, float)
    xs = x_lo + np.arange(len(f))
    b = _site_conductances(env, xs, t)
    if wrap:
        if env.spatial_period() != len(f):
            raise ValidationError("wrap needs f over exactly one spatial period")
        return b * (np.roll(f, -1) + np.roll(f, 1) - 2.0 * f)
    if len(f) < 3:
        raise ValidationError("f needs a margin of one site on each side")
    return b[1:-1] * (f[2:] + f[:-2] - 2.0 * f[1:-1])


# -- propagator by matrix exponentials -------------------------------------


def dual_generator(b, torus=True, levels=None):
    """Generator matrix of the dual walk with per-site conductances ``b``.

    With ``levels = n`` the state is (site, jump count < n) and jumps out of
    the top level are killed, which yields the truncated kernels.
    """
    b = np.asarray(b, float)
    L = len(b)
    M = np.zeros((L, L))
    for x in range(L):
        M[x, x] -= 2.0 * b[x]
        for z in (-1, 1):
            y = x + z
            if torus:
                M[x, y % L] += b[x]
            elif 0 <= y < L:
                M[x, y] += b[x]
    if levels is None:
        return M
    n = int(levels)
    G = np.zeros((L * n, L * n))
    off = M - np.diag(np.diag(M))
    for k in range(n):
        G[k * L:(k + 1) * L, k * L:(k + 1) * L] = np.diag(np.diag(M))
        if k + 1 < n:
            G[k * L:(k + 1) * L, (k + 1) * L:(k + 2) * L] = off
    return G


def kernel_propagator(env, s, t, x_lo, n_sites, torus=True, levels=None):
    """Kernel on a finite (or folded) site block by products of matrix
    exponentials over constancy intervals.  Returns an ``n_sites x n_sites``
    matrix ``P[x, y] = K_n(s, x_lo + x; t, x_lo + y)`` (``levels = n``) or the
    untruncated kernel.  Off-block mass is killed when ``torus`` is False.
    """
    xs = x_lo + np.arange(n_sites)
    e = panel_edges(env, xs, t, s, np.inf)
    dim = n_sites * (levels or 1)
    P = np.eye(dim)
    # the walk runs from s back to t, so later intervals act first
    for a, c in zip(e[-2::-1], e[:0:-1]):
        b = _site_conductances(env, xs, 0.5 * (a + c))
        P = P @ linalg.expm((c - a) * dual_generator(b, torus, levels))
    if levels is None:
        return P
    return sum(P[:n_sites, k * n_sites:(k + 1) * n_sites] for k in range(levels))
