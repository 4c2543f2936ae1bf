"""Statistical experiments: diffusive scaling, corrector growth, subdiffusion, moments of T."""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special, stats

from .errors import BoundaryHit, ValidationError
from .estimators import DiffusivityEstimator, GrowthExponentEstimator, HillEstimator
from .forward import ensemble_X, renewal_ensemble
from .io import csv_text
from .percolation import (Exponential, InterarrivalModel, Pareto, _draw_pair, _size_biased_pair,
                          _unit_time_from, generate_environment, moment_check, sample_cycles)
from .rng import generator, stream_seeds


def ks_normal(samples):
    """Kolmogorov-Smirnov distance to the standard normal and its exact p-value."""
    x = np.sort(np.asarray(samples, float))
    n = len(x)
    cdf = special.ndtr(x)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    return d, float(stats.kstwo.sf(d, n))


def _percentile_ci(values, level):
    a = (1 - level) / 2
    lo, hi = np.quantile(values, [a, 1 - a])
    return [float(lo), float(hi)]


# -- diffusive scaling ---------------------------------------------------------


@dataclass
class ScalingReport:
    scales: list
    t_grid: list
    variances: dict
    sigma2_by_scale: dict
    sigma2: float
    ci: list
    r2: float
    ks: dict
    max_stats: dict
    blocks: dict
    flags: list
    meta: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("raw")
        return d

    def raw_csv(self):
        """Per-path observations ``(block, path_id, time, X)``."""
        pos = self.raw["positions"]
        n, m = pos.shape
        return csv_text(["block", "path_id", "time", "X"],
                        [np.repeat(self.raw["block"], m), np.repeat(np.arange(n), m),
                         np.tile(self.raw["times"], n), pos.ravel()])

    def plot_data(self):
        """Two-column (t, Var/n) text at the largest scale."""
        n = max(self.scales)
        return csv_text(["t", "variance"], [np.array(self.t_grid), np.array(self.variances[str(n)])])


def _slope(times, pos):
    est = DiffusivityEstimator().fit(times, pos)
    return est.sigma2_, est.r2_


def _run_block(job):
    source, b, m, first, seed, times, L, T = job
    if isinstance(source, InterarrivalModel):
        env_seed = int(stream_seeds(seed, "block", [b])[0])
        env = generate_environment(source, L, (0.0, T), seed=env_seed)
    else:
        env = source
    ens = ensemble_X(env, m, times, seed, first_index=first, allow_hits=True)
    ok = ~ens.meta["hit_mask"]
    return ens.positions[ok], ens.running_max[ok], np.full(int(ok.sum()), b), ens.meta["boundary_hits"]


def qip_experiment(source, scales, t_grid, n_paths, seed=0, n_blocks=1, L=None,
                   level=0.95, n_boot=200, moment_orders=(8.0, 8.0), override=False,
                   max_hit_fraction=1e-3, workers=1):
    """Quenched diffusive-scaling experiment.

    ``source`` is either an environment (every block reuses it) or an
    :class:`InterarrivalModel` (every block draws its own environment of
    ``L`` edges centred at 0).  Paths start at the origin at time 0 and are
    observed at ``n * t`` for every scale ``n`` and grid time ``t``.  Blocks
    run in parallel with ``workers > 1``; the result does not depend on it.
    """
    scales = sorted(int(n) for n in scales)
    t_grid = sorted(float(t) for t in t_grid)
    times = np.unique(np.array([n * t for n in scales for t in t_grid]))
    T = float(times[-1])
    flags = []
    meta = {"seed": int(seed), "n_paths": int(n_paths), "n_blocks": int(n_blocks)}
    if isinstance(source, InterarrivalModel):
        mc = moment_check(source, *moment_orders, n_samples=20_000, seed=seed)
        meta["moment_check"] = {k: mc[k] for k in ("p", "s", "p_ok", "s_ok")}
        if not (mc["p_ok"] and mc["s_ok"]):
            if not override:
                raise ValidationError("model fails the moment condition; pass override=True "
                                      "to run anyway", report=meta["moment_check"])
            flags.append("moment condition violated (override)")
        if L is None:
            L = 2 * (int(10 * math.sqrt(2 * T)) + 50)
    per_block = [n_paths // n_blocks + (1 if b < n_paths % n_blocks else 0) for b in range(n_blocks)]
    firsts = np.concatenate(([0], np.cumsum(per_block)[:-1]))
    jobs = [(source, b, m, int(f), seed, times, L, T) for b, (m, f) in enumerate(zip(per_block, firsts))
            if m > 0]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_block, jobs))
    else:
        parts = [_run_block(j) for j in jobs]
    hits = sum(p[3] for p in parts)
    pos_all = [p[0] for p in parts]
    max_all = [p[1] for p in parts]
    blk = [p[2] for p in parts]
    frac = hits / n_paths
    meta["boundary_hit_fraction"] = frac
    if frac > max_hit_fraction:
        raise BoundaryHit("too many paths reached the window edge; enlarge the window "
                          "(L) or use a spatially periodic environment",
                          fraction=frac, limit=max_hit_fraction)
    pos = np.vstack(pos_all)
    mx = np.vstack(max_all)
    blk = np.concatenate(blk)
    idx = {float(t): k for k, t in enumerate(times)}

    variances, s2_by, ks = {}, {}, {}
    r2 = math.nan
    for n in scales:
        cols = [idx[n * t] for t in t_grid]
        sub = pos[:, cols] / math.sqrt(n)
        s2, r2n = _slope(np.array(t_grid), sub)
        variances[str(n)] = np.var(sub, axis=0, ddof=1).tolist()
        s2_by[str(n)] = s2
        r2 = r2n
    n_top = scales[-1]
    sigma2 = s2_by[str(n_top)]
    cols = [idx[n_top * t] for t in t_grid]
    degenerate = not sigma2 > 0
    if degenerate:
        flags.append("degenerate: zero diffusivity (no conductance accrues)")
    for n in scales:
        row = {}
        for t in t_grid:
            x = pos[:, idx[n * t]]
            if degenerate:
                row[str(t)] = {"ks": math.nan, "p_value": math.nan}
            else:
                d, pv = ks_normal(x / math.sqrt(sigma2 * n * t))
                row[str(t)] = {"ks": d, "p_value": pv}
        ks[str(n)] = row
    # bootstrap over blocks when there are several, over paths otherwise
    g = generator(seed, "bootstrap", 0)
    tg = np.array(t_grid)
    sub = pos[:, cols] / math.sqrt(n_top)
    boots = []
    ublk = np.unique(blk)
    for _ in range(n_boot):
        if len(ublk) > 1:
            pick = g.choice(ublk, len(ublk))
            rows = np.concatenate([np.nonzero(blk == b)[0] for b in pick])
        else:
            rows = g.integers(0, len(sub), len(sub))
        boots.append(_slope(tg, sub[rows])[0])
    ci = _percentile_ci(boots, level)
    block_s2 = [_slope(tg, sub[blk == b])[0] for b in ublk] if len(ublk) > 1 else []
    blocks = {"n_blocks": int(len(ublk)),
              "sigma2_per_block": block_s2,
              "between_block_var": float(np.var(block_s2, ddof=1)) if len(block_s2) > 1 else math.nan,
              "within_block_var": float(np.var(boots, ddof=1)) if len(ublk) == 1 else math.nan}
    max_stats = {}
    for n in scales:
        m_end = mx[:, idx[n * t_grid[-1]]] / math.sqrt(max(sigma2, 1e-300) * n * t_grid[-1])
        max_stats[str(n)] = {"mean": float(m_end.mean()), "median": float(np.median(m_end))}
    return ScalingReport(scales, t_grid, variances, s2_by, float(sigma2), ci, float(r2), ks,
                         max_stats, blocks, flags, meta,
                         {"positions": pos, "times": times, "block": blk})


# -- corrector growth -----------------------------------------------------------


def _chi_profile(field_, x, ts):
    return np.array([field_.chi(t, x) for t in ts])


def corrector_sublinearity(field_, n_grid, points_per_piece=16):
    """Growth ratios of the corrector over a grid of scales.

    On a spatially and temporally periodic environment chi is periodic in x
    with the spatial period and shifts by a fixed per-site drift from one
    time period to the next (zero drift for the exact invariant density).
    So the supremum over ``t in [0, n]`` is attained in the first period, the
    last full period or the final partial period, and it suffices to scan one
    period per residue.
    """
    n_grid = sorted(int(n) for n in n_grid)
    if field_.constant is not None:
        rows = [{"n": n, "ratio": 0.0, "space_ratio": 0.0, "time_ratio": 0.0} for n in n_grid]
        return {"rows": rows, "decreasing": len(rows) > 1, "scalar": rows[0]["ratio"] if len(rows) == 1 else None}
    sol = field_._sol
    P = field_.period
    L = field_.L
    if P is None:
        raise ValidationError("growth ratios need a time-periodic corrector")
    k = sol.knots
    u = np.linspace(0.0, 1.0, points_per_piece + 1)[:-1]
    base = np.concatenate([a + (b - a) * u for a, b in zip(k[:-1], k[1:])] + [[k[-1]]]) - sol.t0
    rows = []
    for n in n_grid:
        r = int(math.floor(math.sqrt(n)))
        xs = range(-r, r + 1) if 2 * r + 1 <= L else range(L)
        n_full = int(math.floor(n / P))
        worst = 0.0
        for x in xs:
            prof = _chi_profile(field_, x, base)
            drift = field_.chi(P, x) - field_.chi(0.0, x)
            for m in {0, max(n_full - 1, 0), n_full}:
                shifted = prof + m * drift
                keep = base + m * P <= n
                if keep.any():
                    worst = max(worst, float(np.max(np.abs(shifted[keep]))))
        rows.append({"n": n, "ratio": worst / math.sqrt(n),
                     "space_ratio": abs(field_.chi(0.0, n)) / n,
                     "time_ratio": abs(field_.chi(float(n), 0)) / math.sqrt(n)})
    ratios = [row["ratio"] for row in rows]
    out = {"rows": rows, "epsilon": field_.epsilon}
    if len(rows) == 1:
        out["scalar"] = ratios[0]
        out["decreasing"] = None
    else:
        out["decreasing"] = bool(all(b < a for a, b in zip(ratios[:-1], ratios[1:])))
        out["trend_slope"] = float(np.polyfit(np.log([r["n"] for r in rows]), np.log(ratios), 1)[0]) \
            if min(ratios) > 0 else math.nan
    return out


# -- subdiffusive example -------------------------------------------------------


@dataclass
class SubdiffReport:
    t_grid: list
    positive: dict
    control: dict
    verdict: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _growth(ens, level, n_boot, seed, method):
    t = ens.times
    mx = ens.running_max.astype(float)
    est = GrowthExponentEstimator(method=method).fit(t, mx.mean(axis=0))
    g = generator(seed, "bootstrap", 1)
    boots = []
    for _ in range(n_boot):
        rows = g.integers(0, len(mx), len(mx))
        m = mx[rows].mean(axis=0)
        if np.all(m > 0):
            boots.append(GrowthExponentEstimator(method=method).fit(t, m).exponent_)
    ratio = np.abs(ens.positions) / np.sqrt(t)[None, :]
    return {
        "exponent": est.exponent_, "ci": _percentile_ci(boots, level) if boots else [math.nan] * 2,
        "decades": est.decades_, "sufficient_range": bool(est.sufficient_range_),
        "median_abs_ratio": np.median(ratio, axis=0).tolist(),
        "mean_running_max": mx.mean(axis=0).tolist(),
        "early_crossings": ens.meta["early_crossings"],
        "first_on_quantiles": ens.meta["first_on_quantiles"],
        "edges_touched": ens.meta["edges_touched"], "method": method,
    }


def subdiffusive_experiment(off_tail_index, t_grid, n_paths, seed=0, control_rate=1.0,
                            n_control=None, level=0.95, n_boot=400, method="ols"):
    """Unit ON periods with Lomax OFF periods of the given tail index, plus a
    control run with exponential OFF periods of rate ``control_rate``.

    Both runs use the same construction: cycle 0 is drawn from the cycle law
    and placed uniformly around time 0, every path sees a fresh environment.
    """
    t_grid = np.asarray(sorted(float(t) for t in t_grid))
    pos_ens = renewal_ensemble(Pareto(off_tail_index), 1.0, n_paths, t_grid, seed)
    ctl_ens = renewal_ensemble(Exponential(control_rate), 1.0, n_control or n_paths, t_grid,
                               seed, first_index=10 ** 9)
    pos = _growth(pos_ens, level, n_boot, seed, method)
    ctl = _growth(ctl_ens, level, n_boot, seed, method)
    flags = []
    for name, r in (("positive", pos), ("control", ctl)):
        if not r["sufficient_range"]:
            flags.append(f"{name}: fit spans fewer than 4 decades")
    verdict = {
        "positive_ci_below_half": bool(pos["ci"][1] < 0.5),
        "control_ci_contains_half": bool(ctl["ci"][0] <= 0.5 <= ctl["ci"][1]),
        "no_early_crossings": pos["early_crossings"] == 0 and ctl["early_crossings"] == 0,
        "flags": flags,
    }
    meta = {"off_tail_index": float(off_tail_index), "control_rate": float(control_rate),
            "n_paths": int(n_paths), "seed": int(seed), "design": "annealed"}
    return SubdiffReport(t_grid.tolist(), pos, ctl, verdict, meta)


# -- moments of the unit accumulation time -------------------------------------


def _unit_time(model, rng, start, horizon):
    """First t >= 0 with one unit of ON time accrued since 0, or None past ``horizon``."""
    if model.kind == "markov_alternating":
        cs = sample_cycles(model, (0.0, horizon), rng)
        return _unit_time_from(cs.to_trajectory(0.0, horizon), 0.0)
    if start == "stationary":
        off, on = _size_biased_pair(model, rng, "inverse", None)
    else:
        off, on = _draw_pair(model, rng)
    s = -(off + on) * rng.random()
    acc = 0.0
    while s < horizon:
        a = max(s + off, 0.0)
        b = s + off + on
        if b > a:
            if acc + (b - a) >= 1.0:
                t = a + (1.0 - acc)
                return t if t <= horizon else None
            acc += b - a
        s = b
        off, on = _draw_pair(model, rng)
    return None


def moment_estimate_T(model, alpha, n_samples=10_000, seed=0, horizon=None, level=0.95,
                      n_boot=400):
    """Empirical E(T^alpha) for the unit accumulation time of one edge.

    Samples use the stationary start when the mean cycle is finite and the
    delayed start otherwise (flagged).  Samples whose T falls beyond
    ``horizon`` are excluded and counted.
    """
    if n_samples < 100:
        raise ValidationError("need at least 100 samples", n_samples=n_samples)
    start = "stationary" if math.isfinite(model.cycle_mean) else "delayed"
    if horizon is None:
        horizon = 1e6
    Ts = np.empty(n_samples)
    for k in range(n_samples):
        g = generator(seed, "sample", k)
        T = _unit_time(model, g, start, horizon)
        Ts[k] = math.nan if T is None else T
    reached = Ts[np.isfinite(Ts)]
    n_lost = int(n_samples - len(reached))
    vals = reached ** alpha
    est = float(vals.mean())
    g = generator(seed, "bootstrap", 2)

    def boot_ci(v):
        b = [v[g.integers(0, len(v), len(v))].mean() for _ in range(n_boot)]
        return _percentile_ci(b, level)

    ci = boot_ci(vals)
    quarter = boot_ci(vals[: max(len(vals) // 4, 2)])
    width, wq = ci[1] - ci[0], quarter[1] - quarter[0]
    flags = []
    if n_lost:
        flags.append("horizon: some samples never accrued a unit")
    if start == "delayed":
        flags.append("infinite mean cycle: delayed start used")
    # a finite moment halves the CI width from n/4 to n samples
    unstable = wq > 0 and width > 0.75 * wq
    try:
        hill = HillEstimator().fit(reached).tail_index_
    except ValidationError:
        hill = math.nan
    if hill < alpha:
        unstable = True
    if unstable:
        flags.append("heavy tail: estimate unstable")
    return {"alpha": float(alpha), "estimate": est, "ci": ci, "ci_quarter": quarter,
            "n_used": int(len(reached)), "n_unreached": n_lost, "hill_tail_index": hill,
            "unstable": bool(unstable), "flags": flags, "start": start}
