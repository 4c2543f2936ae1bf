import math

import numpy as np
import pytest

from degen_rwre import EdgeTrajectory, EnvironmentWindow
from degen_rwre.corrector import corrector_field
from degen_rwre.errors import BoundaryHit, ValidationError
from degen_rwre.forward import ensemble_X, martingale_check, renewal_ensemble, simulate_X
from degen_rwre.paths import PathRecord
from degen_rwre.percolation import Constant, Exponential, InterarrivalModel, Pareto

from conftest import constant_env


def test_zero_environment_freezes():
    env = constant_env(0.0)
    rec = simulate_X(env, 3, 0.0, 50.0, seed=1)
    assert rec.n_jumps == 0 and rec.position_at(50.0) == 3


@pytest.mark.parametrize("a", [0.25, 0.5, 1.0])
def test_thinning_rate(a):
    env = constant_env(a)
    n, T = 2000, 25.0
    ens = ensemble_X(env, n, [T], seed=2)
    total = ens.jumps.sum()
    mean = 2 * a * T * n
    assert abs(total - mean) <= 3 * math.sqrt(mean)


def test_constant_variance_is_2t():
    env = constant_env(1.0)
    n, T = 10_000, 100.0
    x = ensemble_X(env, n, [T], seed=3).positions[:, 0]
    # Var of the sample variance of a near-Gaussian: 2 sigma^4 / n
    assert abs(x.var(ddof=1) - 2 * T) <= 3 * 2 * T * math.sqrt(2 / n)
    assert abs(x.mean()) <= 3 * math.sqrt(2 * T / n)


def test_no_crossing_before_first_on():
    closed = EdgeTrajectory.from_pieces([0.0, 5.0, 20.0], [0.0, 1.0])
    open_ = EdgeTrajectory.constant(1.0, 0.0, 20.0)
    edges = [open_] * 10 + [closed] + [open_] * 9
    env = EnvironmentWindow(-10, 10, 0.0, 20.0, edges, periodic=True)
    for p in range(300):
        rec = simulate_X(env, 0, 0.0, 8.0, seed=4, index=p)
        t, e, step = rec.crossings()
        assert not np.any((e == 0) & (t < 5.0))
        assert rec.check_feasible(env)


def test_paths_are_feasible_on_percolation(env_perc):
    for p in range(50):
        rec = simulate_X(env_perc, 0, 0.0, 30.0, seed=5, index=p)
        assert rec.check_feasible(env_perc)
        assert np.all(np.abs(np.diff(np.concatenate(([0], rec.positions)))) == 1)


def test_single_path_ensemble_matches_simulate(env_alt):
    times = [1.0, 3.5, 7.0, 12.0]
    ens = ensemble_X(env_alt, 1, times, seed=6)
    rec = simulate_X(env_alt, 0, 0.0, 12.0, seed=6, index=0)
    assert np.array_equal(ens.positions[0], rec.positions_at(times))
    assert np.array_equal(ens.running_max[0], rec.running_max_abs(times))


def test_determinism(env_perc):
    a = simulate_X(env_perc, 0, 0.0, 20.0, seed=7, index=3)
    b = simulate_X(env_perc, 0, 0.0, 20.0, seed=7, index=3)
    assert a.to_csv() == b.to_csv()
    e1 = ensemble_X(env_perc, 30, [5.0, 10.0], seed=7)
    e2 = ensemble_X(env_perc, 30, [5.0, 10.0], seed=7)
    assert e1.to_csv() == e2.to_csv()


def test_boundary_hit_carries_partial_path():
    env = EnvironmentWindow.constant(1.0, -3, 3, 0.0, 100.0)
    with pytest.raises(BoundaryHit) as exc:
        simulate_X(env, 0, 0.0, 100.0, seed=8)
    path = exc.value.path
    assert isinstance(path, PathRecord)
    assert abs(int(path.positions[-1])) >= 3


def test_annealed_ensemble_reproducible():
    model = InterarrivalModel.renewal(Exponential(1.0), Constant(1.0))
    a = ensemble_X(None, 5, [2.0, 4.0], seed=1, model=model, window=(0.0, 4.0), L=60)
    b = ensemble_X(None, 5, [2.0, 4.0], seed=1, model=model, window=(0.0, 4.0), L=60)
    assert np.array_equal(a.positions, b.positions)
    assert a.meta["design"] == "annealed"


def test_path_record_validation():
    with pytest.raises(ValidationError):
        PathRecord(0.0, 0, np.array([1.0, 0.5]), np.array([1, 0]), 2.0)
    with pytest.raises(ValidationError):
        PathRecord(0.0, 0, np.array([1.0]), np.array([2]), 2.0)


def test_path_csv_columns():
    rec = PathRecord(0.0, 0, np.array([0.5, 1.0]), np.array([1, 2]), 2.0)
    assert rec.to_csv(7).splitlines() == ["path_id,time,position", "7,0,0", "7,0.5,1", "7,1,2"]


# -- martingale check -----------------------------------------------------


def test_martingale_constant_env():
    env = constant_env(1.0)
    field = corrector_field(env, 0.1)
    ens = ensemble_X(env, 2000, [1.0, 5.0, 10.0], seed=9)
    rep = martingale_check(field, ens)
    assert not rep["flagged"]


def test_martingale_percolation_with_bias(env_alt):
    field = corrector_field(env_alt, 0.02)
    fine = corrector_field(env_alt, 0.005)
    ens = ensemble_X(env_alt, 2000, [5.0, 20.0, 50.0], seed=10)
    rep = martingale_check(field, ens, bias_field=fine)
    for row in rep["rows"]:
        assert abs(row["mean"]) <= 3 * row["se"] + abs(row["eps_bias"])
        assert abs(row["eps_bias"]) < 0.5


def test_martingale_frozen_walk():
    zero = EdgeTrajectory.constant(0.0, 0.0, 2.0)
    edge = EdgeTrajectory.from_pieces([0.0, 1.0, 2.0], [1.0, 0.0])
    env = EnvironmentWindow(0, 3, 0.0, 2.0, [zero, edge, zero], periodic=True, time_period=2.0)
    field = corrector_field(env, 0.1)
    ens = ensemble_X(env, 50, [0.5, 1.0, 1.5], x0=0, seed=11)
    # no edge adjacent to site 0 opens: the walk and psi(t, 0) stay put
    assert np.all(ens.positions == 0)
    rep = martingale_check(field, ens)
    assert all(abs(r["mean"]) < 1e-12 for r in rep["rows"])


# -- lazy renewal ensemble --------------------------------------------------


def test_renewal_control_is_diffusive_short():
    ens = renewal_ensemble(Exponential(1.0), 1.0, 400, [100.0, 400.0], seed=1)
    assert ens.meta["early_crossings"] == 0
    v = ens.positions.var(axis=0, ddof=1)
    # diffusivity 2 P(open) <= 1 on each edge; the ratio v(400)/v(100) ~ 4
    assert 2.5 < v[1] / v[0] < 6.0


def test_renewal_pareto_no_early_crossings():
    ens = renewal_ensemble(Pareto(0.4), 1.0, 200, [10.0, 1000.0], seed=2)
    assert ens.meta["early_crossings"] == 0
    assert ens.meta["edges_touched"] > 0


def test_renewal_constant_off_matches_quenched_law():
    # OFF = 1, ON = 1 annealed with a uniform phase per edge: P(open at 0) = 1/2
    ens = renewal_ensemble(Constant(1.0), 1.0, 4000, [0.05], seed=3)
    moved = np.mean(ens.jumps > 0)
    # first event within 0.05: rate 2 * P(open) * ... ~ 1 - exp(-0.05 * 2 * 0.5)
    assert moved == pytest.approx(1 - math.exp(-0.05), abs=0.015)
