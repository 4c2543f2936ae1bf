"""Dynamical percolation: alternating OFF/ON edge processes.

Cycle ``i`` is an OFF period of length ``off_i`` followed by an ON period of
length ``on_i``.  Interarrival laws are specified under the cycle-stationary
(de-size-biased) measure; the time-stationary edge process is obtained by
drawing the cycle that contains time 0 from the length-biased law and placing
its start uniformly, ``tau0 = -(off_0 + on_0) * U``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import rng as rngmod
from .env import EdgeTrajectory, EnvironmentWindow
from .errors import SizeBiasOverflow, ValidationError

# -- interarrival distributions -----------------------------------------


@dataclass(frozen=True)
class Exponential:
    rate: float

    family = "exponential"

    def __post_init__(self):
        if not self.rate > 0:
            raise ValidationError("exponential rate must be positive", rate=self.rate)

    @property
    def mean(self):
        return 1.0 / self.rate

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size)

    def sample_size_biased(self, rng, size=None):
        return rng.gamma(2.0, 1.0 / self.rate, size)

    def moment(self, q):
        """E X^q, or inf when it diverges."""
        if q <= -1:
            return math.inf
        return math.gamma(q + 1.0) / self.rate ** q

    def params(self):
        return {"rate": self.rate}


@dataclass(frozen=True)
class Pareto:
    """Lomax law with survival ``(scale / (scale + x)) ** tail_index``."""

    tail_index: float
    scale: float = 1.0

    family = "pareto"

    def __post_init__(self):
        if not (self.tail_index > 0 and self.scale > 0):
            raise ValidationError("pareto needs tail_index > 0 and scale > 0",
                                  tail_index=self.tail_index, scale=self.scale)

    @property
    def mean(self):
        if self.tail_index <= 1:
            return math.inf
        return self.scale / (self.tail_index - 1.0)

    def sample(self, rng, size=None):
        return self.scale * rng.pareto(self.tail_index, size)

    def sample_size_biased(self, rng, size=None):
        # Lomax is an Exp(L) mixture with L ~ Gamma(tail, rate=scale); length
        # biasing shifts the mixing shape down by one.
        if self.tail_index <= 1:
            raise ValidationError("length-biased pareto needs tail_index > 1")
        lam = rng.gamma(self.tail_index - 1.0, 1.0 / self.scale, size)
        return rng.gamma(2.0, 1.0, size) / lam

    def moment(self, q):
        b = self.tail_index
        if q <= -1 or q >= b:
            return math.inf
        return self.scale ** q * math.exp(
            special.gammaln(q + 1) + special.gammaln(b - q) - special.gammaln(b))

    def params(self):
        return {"tail_index": self.tail_index, "scale": self.scale}


@dataclass(frozen=True)
class Uniform:
    a: float
    b: float

    family = "uniform"

    def __post_init__(self):
        if not (0 <= self.a < self.b < math.inf):
            raise ValidationError("uniform needs 0 <= a < b", a=self.a, b=self.b)

    @property
    def mean(self):
        return 0.5 * (self.a + self.b)

    def sample(self, rng, size=None):
        x = rng.uniform(self.a, self.b, size)
        if self.a == 0:
            # zero has probability zero but the generator can return it
            x = np.where(x > 0, x, self.b * 1e-300) if size is not None else (x or self.b * 1e-300)
        return x

    def sample_size_biased(self, rng, size=None):
        u = rng.random(size)
        return np.sqrt(self.a ** 2 + u * (self.b ** 2 - self.a ** 2))

    def moment(self, q):
        a, b = self.a, self.b
        if q == -1:
            return math.log(b / a) / (b - a) if a > 0 else math.inf
        if q < -1 and a == 0:
            return math.inf
        return (b ** (q + 1) - a ** (q + 1)) / ((q + 1) * (b - a))

    def params(self):
        return {"a": self.a, "b": self.b}


@dataclass(frozen=True)
class Constant:
    c: float

    family = "constant"

    def __post_init__(self):
        if not (0 < self.c < math.inf):
            raise ValidationError("constant duration must be positive", c=self.c)

    @property
    def mean(self):
        return self.c

    def sample(self, rng, size=None):
        return self.c if size is None else np.full(size, float(self.c))

    sample_size_biased = sample

    def moment(self, q):
        return self.c ** q

    def params(self):
        return {"c": self.c}


FAMILIES = {"exponential": Exponential, "pareto": Pareto, "uniform": Uniform, "constant": Constant}


def distribution_from_spec(spec):
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in FAMILIES:
        raise ValidationError("unknown distribution", kind=kind)
    return FAMILIES[kind](**spec)


def distribution_spec(d):
    return {"kind": d.family, **d.params()}


# -- models -------------------------------------------------------------


@dataclass(frozen=True)
class InterarrivalModel:
    """Law of the OFF/ON cycle sequence.

    ``kind`` is ``"deterministic"``, ``"renewal"`` or ``"markov_alternating"``.
    Markov models carry ``regimes`` (pairs of OFF/ON laws) and a row-stochastic
    ``transition`` matrix between consecutive cycles; they are started by
    ``burn_in`` time units of forward simulation.
    """

    kind: str
    off: object = None
    on: object = None
    regimes: tuple = ()
    transition: tuple = ()
    burn_in: float = 200.0

    def __post_init__(self):
        if self.kind in ("deterministic", "renewal"):
            if self.off is None or self.on is None:
                raise ValidationError("renewal model needs off and on laws")
        elif self.kind == "markov_alternating":
            P = np.asarray(self.transition, float)
            k = len(self.regimes)
            if k == 0 or P.shape != (k, k) or np.any(P < 0) or not np.allclose(P.sum(1), 1):
                raise ValidationError("markov model needs k regimes and a k x k stochastic matrix")
            if not self.burn_in > 0:
                raise ValidationError("burn_in must be positive")
        else:
            raise ValidationError("unknown model kind", kind=self.kind)

    @classmethod
    def deterministic(cls, d_off, d_on):
        return cls("deterministic", Constant(d_off), Constant(d_on))

    @classmethod
    def renewal(cls, off, on):
        return cls("renewal", off, on)

    @classmethod
    def markov_alternating(cls, regimes, transition, burn_in=200.0):
        return cls("markov_alternating", regimes=tuple(tuple(r) for r in regimes),
                   transition=tuple(map(tuple, np.asarray(transition, float))), burn_in=burn_in)

    @property
    def cycle_mean(self):
        if self.kind == "markov_alternating":
            pi = _stationary(np.asarray(self.transition))
            return float(sum(p * (r[0].mean + r[1].mean) for p, r in zip(pi, self.regimes)))
        return self.off.mean + self.on.mean

    @property
    def on_fraction(self):
        """Stationary probability that an edge is ON."""
        if self.kind == "markov_alternating":
            pi = _stationary(np.asarray(self.transition))
            on = sum(p * r[1].mean for p, r in zip(pi, self.regimes))
            return float(on / self.cycle_mean)
        return self.on.mean / (self.off.mean + self.on.mean)

    def to_spec(self):
        if self.kind == "markov_alternating":
            return {
                "kind": self.kind,
                "regimes": [[distribution_spec(a), distribution_spec(b)] for a, b in self.regimes],
                "transition": [list(r) for r in self.transition],
                "burn_in": self.burn_in,
            }
        if self.kind == "deterministic":
            return {"kind": self.kind, "d_off": self.off.c, "d_on": self.on.c}
        return {"kind": self.kind, "off": distribution_spec(self.off), "on": distribution_spec(self.on)}

    @classmethod
    def from_spec(cls, spec):
        try:
            return cls._from_spec(spec)
        except (KeyError, TypeError) as exc:
            raise ValidationError("malformed model spec", missing_or_bad=str(exc)) from None

    @classmethod
    def _from_spec(cls, spec):
        kind = spec.get("kind")
        if kind == "deterministic":
            return cls.deterministic(spec["d_off"], spec["d_on"])
        if kind == "renewal":
            return cls.renewal(distribution_from_spec(spec["off"]), distribution_from_spec(spec["on"]))
        if kind == "markov_alternating":
            regimes = [(distribution_from_spec(a), distribution_from_spec(b)) for a, b in spec["regimes"]]
            return cls.markov_alternating(regimes, spec["transition"], spec.get("burn_in", 200.0))
        raise ValidationError("unknown model kind", kind=kind)


def _stationary(P):
    w, v = np.linalg.eig(P.T)
    k = np.argmin(abs(w - 1))
    pi = np.real(v[:, k])
    return pi / pi.sum()


# -- cycle sampling -------------------------------------------------------


@dataclass(frozen=True)
class CycleSequence:
    """Cycles ``first_index, ..., first_index + len(cycles) - 1``.

    ``cycles[k] = (off, on)``; cycle 0 starts at ``tau0`` and contains time 0.
    """

    cycles: np.ndarray
    tau0: float
    first_index: int
    metadata: dict = field(default_factory=dict)

    @property
    def starts(self):
        """Start time (ON to OFF switch) of every stored cycle."""
        lengths = self.cycles.sum(axis=1)
        k0 = -self.first_index
        s = np.empty(len(lengths))
        s[k0] = self.tau0
        s[k0 + 1:] = self.tau0 + np.cumsum(lengths[k0:-1])
        if k0 > 0:
            s[:k0] = self.tau0 - np.cumsum(lengths[:k0][::-1])[::-1]
        return s

    def cycle(self, i):
        return tuple(self.cycles[i - self.first_index])

    def to_trajectory(self, t_min, t_max):
        s = self.starts
        on_at = s + self.cycles[:, 0]
        knots = np.empty(2 * len(s) + 1)
        knots[0:-1:2] = s
        knots[1::2] = on_at
        knots[-1] = s[-1] + self.cycles[-1].sum()
        values = np.tile([0.0, 1.0], len(s))
        if knots[0] > t_min or knots[-1] < t_max:
            raise ValidationError("cycles do not cover the window")
        lo = np.searchsorted(knots, t_min, side="right") - 1
        hi = np.searchsorted(knots, t_max, side="left")
        kk = np.concatenate(([t_min], knots[lo + 1:hi], [t_max]))
        return EdgeTrajectory.from_pieces(kk, values[lo:hi])


def _draw_pair(model, rng, regime=None):
    if regime is not None:
        off, on = model.regimes[regime]
    else:
        off, on = model.off, model.on
    return float(off.sample(rng)), float(on.sample(rng))


def _size_biased_pair(model, rng, method, cap):
    off, on = model.off, model.on
    if method == "rejection":
        # proposal from the cycle law, accept with probability length / cap
        for _ in range(1_000_000):
            x, y = float(off.sample(rng)), float(on.sample(rng))
            if x + y > cap:
                raise SizeBiasOverflow(
                    "cycle length exceeded the rejection envelope; use method='inverse' "
                    "or raise the cap", cap=cap, length=x + y)
            if rng.random() * cap < x + y:
                return x, y
        raise SizeBiasOverflow("rejection sampler did not accept", cap=cap)
    m_off, m_on = off.mean, on.mean
    if rng.random() * (m_off + m_on) < m_off:
        return float(off.sample_size_biased(rng)), float(on.sample(rng))
    return float(off.sample(rng)), float(on.sample_size_biased(rng))


def sample_cycles(model, window, rng, start="stationary", method="inverse", cap=None):
    """Cycles covering ``window`` with cycle 0 containing time 0.

    ``start="stationary"`` draws cycle 0 length-biased (exact stationary
    start).  ``start="delayed"`` draws it from the cycle law itself, which is
    the only option when the mean cycle length is infinite.
    """
    t_min, t_max = map(float, window)
    if not t_min <= 0.0 <= t_max:
        # the construction is anchored at time 0; extend virtually
        t_min, t_max = min(t_min, 0.0), max(t_max, 0.0)
    if model.kind == "markov_alternating":
        return _markov_cycles(model, (t_min, t_max), rng)
    if start == "stationary":
        if not math.isfinite(model.cycle_mean):
            raise ValidationError("infinite mean cycle length has no stationary start; "
                                  "use start='delayed'")
        if method == "rejection" and cap is None:
            raise ValidationError("rejection sampling needs a cap")
        pair0 = _size_biased_pair(model, rng, method, cap)
    elif start == "delayed":
        pair0 = _draw_pair(model, rng)
    else:
        raise ValidationError("unknown start", start=start)
    tau0 = -(pair0[0] + pair0[1]) * rng.random()
    fwd = [pair0]
    t = tau0 + sum(pair0)
    while t < t_max:
        p = _draw_pair(model, rng)
        fwd.append(p)
        t += p[0] + p[1]
    back = []
    t = tau0
    while t > t_min:
        p = _draw_pair(model, rng)
        back.append(p)
        t -= p[0] + p[1]
    cycles = np.array(back[::-1] + fwd, float).reshape(-1, 2)
    return CycleSequence(cycles, tau0, -len(back), {"start": start})


def _markov_cycles(model, window, rng):
    t_min, t_max = window
    P = np.asarray(model.transition)
    pi = _stationary(P)
    regime = int(rng.choice(len(pi), p=pi))
    t = t_min - model.burn_in
    pairs, starts = [], []
    while t <= t_max:
        p = _draw_pair(model, rng, regime)
        pairs.append(p)
        starts.append(t)
        t += p[0] + p[1]
        regime = int(rng.choice(len(pi), p=P[regime]))
    starts = np.array(starts)
    k0 = int(np.searchsorted(starts, 0.0, side="right") - 1)
    return CycleSequence(np.array(pairs), float(starts[k0]), -k0,
                         {"start": "burn_in", "burn_in": model.burn_in, "approximate_stationarity": True})


def sample_edge_trajectory(model, window, rng, start="stationary", method="inverse", cap=None):
    """One edge's zero-one conductance path on ``window``."""
    cs = sample_cycles(model, window, rng, start, method, cap)
    return cs.to_trajectory(*map(float, window))


def generate_environment(model, L, window, periodic=False, seed=0, x_min=None,
                         time_period=None, start="stationary", method="inverse", cap=None):
    """``L`` independent edges; edge ``k`` uses stream ``(seed, "edge", k)``.

    With ``time_period`` the window is ``[t0, t0 + time_period]`` and the
    trajectories are declared periodic.  That is exact for deterministic
    models when the period is a multiple of the cycle length; otherwise the
    metadata marks the sample as periodized.
    """
    if int(L) < 1:
        raise ValidationError("need L >= 1", L=L)
    L = int(L)
    x_min = -(L // 2) if x_min is None else int(x_min)
    t_min, t_max = map(float, window)
    meta = {"generator": model.to_spec(), "seed": int(seed), "start": start}
    if time_period is not None:
        t_max = t_min + float(time_period)
        exact = False
        if model.kind == "deterministic":
            ratio = float(time_period) / (model.off.c + model.on.c)
            exact = abs(ratio - round(ratio)) < 1e-12 and round(ratio) >= 1
        meta["periodized"] = not exact
    if model.kind == "markov_alternating":
        meta["approximate_stationarity"] = True
        meta["burn_in"] = model.burn_in
    edges = []
    for k in range(L):
        g = rngmod.generator(seed, "edge", k)
        edges.append(sample_edge_trajectory(model, (t_min, t_max), g, start, method, cap))
    return EnvironmentWindow(x_min, x_min + L, t_min, t_max, edges, bool(periodic),
                             time_period, meta)


# -- moment diagnostics ---------------------------------------------------


def hill_tail_index(samples, top_fraction=0.01):
    """Hill estimate of the tail index from the top ``top_fraction`` order statistics."""
    x = np.sort(np.asarray(samples, float))[::-1]
    x = x[x > 0]
    k = max(int(math.ceil(top_fraction * len(x))), 2)
    if len(x) <= k:
        return math.nan
    gamma = np.mean(np.log(x[:k])) - math.log(x[k])
    return 1.0 / gamma if gamma > 0 else math.inf


def _finite_moment(d, q):
    """True/False when the family decides finiteness of E X^q, None otherwise."""
    if isinstance(d, (Exponential, Pareto, Uniform, Constant)):
        return math.isfinite(d.moment(q))
    return None


def moment_threshold(p):
    """Smallest admissible negative-moment order for a given p > 4."""
    return 4.0 * (1.0 - 1.0 / p) / (1.0 - 4.0 / p)


def moment_check(model, p, s, n_samples=100_000, seed=0):
    """Report on the OFF/ON moment condition with orders ``p`` and ``s``.

    The condition asks for p > 4, s above ``moment_threshold(p)``, a finite
    p-th moment of the cycle length and a finite (-s)-th moment of the ON
    time, all under the cycle law.
    """
    report = {"p": p, "s": s, "p_admissible": bool(p > 4), "s_admissible": None,
              "estimates": {}, "tail_fits": {}, "flags": []}
    if p > 4:
        report["s_admissible"] = bool(s > moment_threshold(p))
        report["s_threshold"] = moment_threshold(p)
    if model.kind == "markov_alternating":
        laws = [r for pair in model.regimes for r in pair]
        on_laws = [pair[1] for pair in model.regimes]
    else:
        laws = [model.off, model.on]
        on_laws = [model.on]
    p_verdicts = [_finite_moment(d, p) for d in laws]
    s_verdicts = [_finite_moment(d, -s) for d in on_laws]
    g = rngmod.generator(seed, "sample", 0)
    if model.kind == "markov_alternating":
        P = np.asarray(model.transition)
        regime = int(g.choice(len(P), p=_stationary(P)))
        pairs = np.empty((n_samples, 2))
        for k in range(n_samples):
            pairs[k] = _draw_pair(model, g, regime)
            regime = int(g.choice(len(P), p=P[regime]))
    else:
        pairs = np.column_stack([np.asarray(model.off.sample(g, n_samples), float),
                                 np.asarray(model.on.sample(g, n_samples), float)])
    length = pairs.sum(1)
    report["estimates"] = {
        "cycle_length_mean": float(length.mean()),
        "cycle_length_fourth_moment": float(np.mean(length ** 4)),
        "on_negative_moment": float(np.mean(pairs[:, 1] ** (-s))),
    }
    report["tail_fits"] = {
        "cycle_length_hill": hill_tail_index(length),
        "on_inverse_hill": hill_tail_index(1.0 / pairs[:, 1]),
    }
    if all(v is not None for v in p_verdicts):
        p_fin = all(p_verdicts)
    else:
        p_fin = report["tail_fits"]["cycle_length_hill"] > p
        report["flags"].append("p verdict from tail fit")
    if all(v is not None for v in s_verdicts):
        s_fin = all(s_verdicts)
    else:
        s_fin = report["tail_fits"]["on_inverse_hill"] > s
        report["flags"].append("s verdict from tail fit")
    if model.kind != "markov_alternating":
        analytic = []
        for d in (model.off, model.on):
            analytic.append(d.moment(4))
        if all(math.isfinite(a) for a in analytic):
            # E(off + on)^4 by binomial expansion of independent parts
            off, on = model.off, model.on
            report["cycle_length_fourth_moment_exact"] = math.fsum(
                math.comb(4, k) * off.moment(k) * on.moment(4 - k) for k in range(5))
    report["p_moment_finite"] = bool(p_fin)
    report["s_moment_finite"] = bool(s_fin)
    report["p_ok"] = bool(p > 4 and p_fin)
    report["s_ok"] = bool(p > 4 and report["s_admissible"] and s_fin)
    return report


def _theta(r, p):
    if math.isinf(p):
        return r
    return r * (1.0 - 1.0 / p) / (1.0 - r / p)


INFEASIBLE = "INFEASIBLE"


def plan_alpha(p, s):
    """Moment orders for the unit-accumulation bound.

    Returns ``{"r", "s_tilde", "alpha"}`` or ``INFEASIBLE``.  ``s_tilde`` is
    the midpoint between ``s`` and the threshold; ``r`` is just below the
    largest value in ``(4, p)`` with ``s_tilde > r (1 - 1/p) / (1 - r/p)`` and
    ``alpha = 3 r / 4``.
    """
    p = float(p)
    s = float(s)
    if not (p > 4 and s > _theta(4.0, p)):
        return INFEASIBLE
    s_tilde = 0.5 * (s + _theta(4.0, p))
    # theta(r) = s_tilde  <=>  r = s_tilde p / (p - 1 + s_tilde)
    r_star = s_tilde if math.isinf(p) else s_tilde * p / (p - 1.0 + s_tilde)
    r = r_star - 1e-9 * (r_star - 4.0)
    while not (s_tilde > _theta(r, p)) and r > 4.0:
        r = 4.0 + 0.5 * (r - 4.0)
    return {"r": r, "s_tilde": s_tilde, "alpha": 0.75 * r, "r_sup": r_star}


def unit_on_count(traj, start=0.0):
    """``N`` = number of ON periods after the one containing ``start`` needed
    to accrue one unit, and the cycle-length bound on the unit accumulation time.

    Cycles are read from the zero-one trajectory; cycle 0 is the one whose OFF
    period starts at or before ``start``.  Returns ``(N, bound, T)`` where
    ``T`` is the exact unit accumulation time measured from ``start``.
    """
    k = traj.knots
    v = traj.values
    if not np.all((v == 0) | (v == 1)):
        raise ValidationError("unit_on_count needs a zero-one trajectory")
    sw = np.nonzero(np.diff(v) != 0)[0] + 1
    off_starts = k[sw][v[sw] == 0]
    on_starts = k[sw][v[sw] == 1]
    j0 = np.searchsorted(off_starts, start, side="right") - 1
    if j0 < 0:
        raise ValidationError("cycle containing the start is not inside the trajectory window")
    tau0 = off_starts[j0]
    acc = 0.0
    for n in range(1, len(off_starts) - j0 - 1):
        begin = off_starts[j0 + n]
        end = off_starts[j0 + n + 1]
        on_begin = on_starts[np.searchsorted(on_starts, begin, side="right")]
        acc += end - on_begin
        if acc >= 1.0:
            bound = end - tau0
            T = _unit_time_from(traj, start)
            if T is None or T > bound:
                raise AssertionError("unit accumulation time exceeds the cycle bound")
            return n, bound, T
    raise ValidationError("horizon exhausted before one ON unit accrued after cycle 0")


def _unit_time_from(traj, start):
    k = traj.knots
    v = traj.values
    acc = 0.0
    for j in range(len(v)):
        a = max(k[j], start)
        b = k[j + 1]
        if b <= a:
            continue
        if acc + v[j] * (b - a) >= 1.0:
            return a + (1.0 - acc) / v[j]
        acc += v[j] * (b - a)
    return None
