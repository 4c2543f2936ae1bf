import math

import numpy as np
import pytest
from scipy import integrate, stats

from degen_rwre import EnvironmentWindow
from degen_rwre.corrector import corrector_field, sigma2_estimate
from degen_rwre.errors import BoundaryHit, ValidationError
from degen_rwre.harness import (
    corrector_sublinearity,
    ks_normal,
    moment_estimate_T,
    qip_experiment,
    subdiffusive_experiment,
)
from degen_rwre.percolation import Exponential, InterarrivalModel, Pareto, Uniform

from conftest import alternating_env


def deterministic_3_1_moment(alpha):
    """E T^alpha for OFF 3, ON 1 from a uniform phase: T = 4 - u while OFF, 4 while ON."""
    T = lambda u: 4.0 - u if u < 3.0 else 4.0
    return integrate.quad(lambda u: T(u) ** alpha, 0.0, 4.0, points=[3.0])[0] / 4.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ks_matches_scipy(seed):
    x = np.random.default_rng(seed).normal(size=300)
    d, p = ks_normal(x)
    ref = stats.kstest(x, "norm", method="exact")
    assert d == pytest.approx(ref.statistic, abs=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-6)


def test_qip_on_closed_environment_is_degenerate():
    env = EnvironmentWindow.constant(0.0, -20, 20, 0.0, 200.0)
    rep = qip_experiment(env, [1, 10], [1.0, 2.0], 50, n_boot=20)
    assert rep.sigma2 == 0.0
    assert any("degenerate" in f for f in rep.flags)
    assert math.isnan(rep.ks["10"]["2.0"]["ks"])


def test_qip_sigma2_matches_corrector_prediction(env_alt):
    rep = qip_experiment(env_alt, [200], [1.0, 2.0, 3.0, 4.0], 8000, seed=3, n_blocks=8,
                         n_boot=200)
    predicted = sigma2_estimate(env_alt)
    lo, hi = rep.ci
    slack = 3 * predicted["error"]
    assert lo - slack <= predicted["sigma2"] <= hi + slack
    assert rep.blocks["n_blocks"] == 8
    assert len(rep.blocks["sigma2_per_block"]) == 8
    assert rep.r2 > 0.9


def test_qip_reproducible_and_worker_independent(env_alt):
    args = (env_alt, [5, 20], [1.0, 2.0], 200)
    a = qip_experiment(*args, seed=11, n_blocks=2, n_boot=30)
    b = qip_experiment(*args, seed=11, n_blocks=2, n_boot=30, workers=2)
    np.testing.assert_array_equal(a.raw["positions"], b.raw["positions"])
    assert a.to_dict() == b.to_dict()
    assert a.raw_csv() == b.raw_csv()
    c = qip_experiment(*args, seed=12, n_blocks=2, n_boot=30)
    assert not np.array_equal(a.raw["positions"], c.raw["positions"])


def test_qip_report_shapes(env_alt):
    rep = qip_experiment(env_alt, [4, 8], [1.0, 2.0, 3.0], 100, n_boot=10)
    assert set(rep.variances) == {"4", "8"}
    assert len(rep.variances["8"]) == 3
    assert set(rep.ks["4"]) == {"1.0", "2.0", "3.0"}
    header, *lines = rep.raw_csv().strip().splitlines()
    assert header == "block,path_id,time,X"
    assert len(lines) == 100 * len(np.unique([4, 8, 12, 16, 24]))
    assert rep.plot_data().startswith("t,variance")


def test_qip_model_moment_gate():
    heavy = InterarrivalModel.renewal(Pareto(1.5), Exponential(1.0))
    with pytest.raises(ValidationError):
        qip_experiment(heavy, [1], [1.0], 10)


def test_qip_boundary_hits_raise():
    env = EnvironmentWindow.constant(1.0, -3, 3, 0.0, 100.0)
    with pytest.raises(BoundaryHit):
        qip_experiment(env, [10], [5.0], 50, n_boot=5)


def test_qip_on_model_draws_environments():
    # exponential ON times have no negative moments, so bound them away from zero
    model = InterarrivalModel.renewal(Exponential(1.0), Uniform(0.5, 1.5))
    rep = qip_experiment(model, [10], [1.0, 2.0], 60, n_blocks=3, n_boot=20)
    assert rep.meta["moment_check"]["p_ok"]
    assert rep.sigma2 > 0
    assert len(rep.blocks["sigma2_per_block"]) == 3


# -- corrector growth ----------------------------------------------------------


def test_sublinearity_homogeneous(env_const):
    f = corrector_field(env_const, 0.1)
    out = corrector_sublinearity(f, [10, 100])
    assert [r["ratio"] for r in out["rows"]] == [0.0, 0.0]
    single = corrector_sublinearity(f, [10])
    assert single["scalar"] == 0.0


def test_sublinearity_invariant_density(env_alt):
    f = corrector_field(env_alt, 0.0)
    out = corrector_sublinearity(f, [10, 100, 1000])
    ratios = [r["ratio"] for r in out["rows"]]
    assert out["decreasing"]
    # bounded chi: ratio times sqrt(n) is flat
    assert out["trend_slope"] == pytest.approx(-0.5, abs=0.05)
    assert ratios[-1] < 0.05
    single = corrector_sublinearity(f, [100])
    assert single["decreasing"] is None
    assert single["scalar"] == pytest.approx(ratios[1])


def test_sublinearity_scan_matches_brute_force(env_alt):
    f = corrector_field(env_alt, 0.0)
    n = 12
    ts = np.linspace(0.0, n, 2401)
    brute = max(abs(f.chi(t, x)) for x in range(-3, 4) for t in ts) / math.sqrt(n)
    fast = corrector_sublinearity(f, [n], points_per_piece=64)["scalar"]
    assert fast == pytest.approx(brute, rel=2e-3)


# -- unit accumulation time ----------------------------------------------------


def test_moment_of_T_deterministic():
    model = InterarrivalModel.deterministic(3.0, 1.0)
    out = moment_estimate_T(model, 3.0, n_samples=4000, seed=1)
    exact = deterministic_3_1_moment(3.0)
    assert exact == pytest.approx(31.9375, abs=1e-10)
    assert out["ci"][0] <= exact <= out["ci"][1]
    assert out["start"] == "stationary"
    assert not out["unstable"]
    assert out["n_unreached"] == 0


def test_moment_of_T_heavy_tail_is_flagged():
    model = InterarrivalModel.renewal(Pareto(0.4), Exponential(1.0))
    out = moment_estimate_T(model, 3.5, n_samples=2000, seed=0, horizon=1e5)
    assert out["start"] == "delayed"
    assert out["unstable"]
    assert any("heavy tail" in f for f in out["flags"])


def test_moment_of_T_needs_samples():
    with pytest.raises(ValidationError):
        moment_estimate_T(InterarrivalModel.deterministic(1.0, 1.0), 2.0, n_samples=10)


# -- subdiffusive example ------------------------------------------------------


def test_subdiffusive_small_run_structure():
    rep = subdiffusive_experiment(0.4, np.logspace(1, 3, 5), 80, seed=4, n_boot=50)
    d = rep.to_dict()
    assert set(d["verdict"]) == {"positive_ci_below_half", "control_ci_contains_half",
                                 "no_early_crossings", "flags"}
    assert len(d["verdict"]["flags"]) == 2          # two decades only
    assert d["verdict"]["no_early_crossings"]
    assert rep.positive["exponent"] < rep.control["exponent"]
    again = subdiffusive_experiment(0.4, np.logspace(1, 3, 5), 80, seed=4, n_boot=50)
    assert again.to_dict() == d
