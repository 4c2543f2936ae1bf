import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from degen_rwre import (UNREACHED, EdgeTrajectory, EnvironmentWindow, conductance_at,
                        cumulative_conductance, shift, unit_accumulation_time)
from degen_rwre.errors import ValidationError, WindowError

from conftest import uniform_edges


def single(traj, periodic=False):
    return EnvironmentWindow(0, 1, traj.t_min, traj.t_max, [traj], periodic)


def test_constant_one_everywhere():
    env = EnvironmentWindow.constant(1.0, -3, 3, 0.0, 10.0)
    for t in (0.0, 2.5, 10.0):
        for x in range(-3, 3):
            assert conductance_at(env, t, x) == 1.0


def test_right_continuity(off_on_edge):
    env = single(off_on_edge)
    assert conductance_at(env, 1.0, 0) == 0.0
    assert conductance_at(env, 2.0, 0) == 1.0
    assert conductance_at(env, 3.0, 0) == 0.0


def test_shifted_view_reads_later_time(off_on_edge):
    env = single(off_on_edge)
    assert conductance_at(shift(env, 2.0, 0), 0.0, 0) == 1.0


def test_out_of_window_names_the_query(off_on_edge):
    env = single(off_on_edge)
    with pytest.raises(WindowError) as exc:
        conductance_at(env, 7.5, 0)
    assert exc.value.details == {"t": 7.5, "x": 0}
    with pytest.raises(WindowError):
        conductance_at(env, 1.0, 1)


@pytest.mark.parametrize("value,t1,expected", [(1.0, 3.0, 3.0), (0.5, 3.0, 1.5)])
def test_cumulative_constant(value, t1, expected):
    env = EnvironmentWindow.constant(value, 0, 1, 0.0, 5.0)
    assert cumulative_conductance(env, 0, 0.0, t1) == expected


def test_cumulative_piecewise(off_on_edge):
    assert cumulative_conductance(single(off_on_edge), 0, 0.0, 5.0) == 1.0


def test_unit_accumulation_examples(off_on_edge):
    assert unit_accumulation_time(EnvironmentWindow.constant(1.0, 0, 1, 0.0, 5.0), 0) == 1.0
    assert unit_accumulation_time(EnvironmentWindow.constant(0.5, 0, 1, 0.0, 5.0), 0) == 2.0
    assert unit_accumulation_time(single(off_on_edge), 0) == 3.0


def test_unreached_is_a_value():
    env = EnvironmentWindow.constant(0.1, 0, 1, 0.0, 5.0)
    T = unit_accumulation_time(env, 0)
    assert T is UNREACHED and not T


def test_values_outside_unit_interval_rejected():
    with pytest.raises(ValidationError):
        EdgeTrajectory([1.0], [0.5, 1.5], 0.0, 2.0)
    with pytest.raises(ValidationError):
        EdgeTrajectory([1.0, 1.0], [0.5, 1.0, 0.0], 0.0, 2.0)


def test_identity_shift_and_group_law(off_on_edge):
    env = uniform_edges(off_on_edge, 4, periodic=False)
    same = shift(env, 0.0, 0)
    back = shift(shift(env, 1.0, 2), -1.0, -2)
    for t in np.linspace(0, 5, 21):
        for x in range(4):
            v = conductance_at(env, t, x)
            assert conductance_at(same, t, x) == v
            assert conductance_at(back, t, x) == v


def test_periodic_space_shift_by_period(env_alt):
    moved = shift(env_alt, 0.0, 8)
    for t in np.linspace(0, 2, 9):
        for x in range(8):
            assert conductance_at(moved, t, x) == conductance_at(env_alt, t, x)


def test_json_round_trip(env_perc):
    back = EnvironmentWindow.from_json(env_perc.to_json())
    for x in range(env_perc.n_edges):
        a, b = env_perc.edge(x), back.edge(x)
        assert np.array_equal(a.jump_times, b.jump_times)
        assert np.array_equal(a.values, b.values)
    assert back.time_period == env_perc.time_period


def test_json_has_17_digit_times(env_perc):
    text = env_perc.to_json()
    jt = env_perc.edge(0).jump_times[0]
    assert "%.17g" % jt in text


# -- properties ----------------------------------------------------------

pieces = st.lists(st.tuples(st.floats(0.01, 3.0), st.sampled_from([0.0, 0.25, 0.5, 1.0])),
                  min_size=1, max_size=12)


def build(pcs):
    knots = np.concatenate(([0.0], np.cumsum([p[0] for p in pcs])))
    return EdgeTrajectory.from_pieces(knots, [p[1] for p in pcs])


@given(pieces, st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_cumulative_is_additive(pcs, u, v, w):
    tr = build(pcs)
    a, b, c = sorted(x * tr.t_max for x in (u, v, w))
    env = single(tr)
    whole = cumulative_conductance(env, 0, a, c)
    parts = cumulative_conductance(env, 0, a, b) + cumulative_conductance(env, 0, b, c)
    assert math.isclose(whole, parts, rel_tol=1e-12, abs_tol=1e-12)


@given(pieces)
def test_unit_time_inverts_cumulative(pcs):
    tr = build(pcs)
    env = single(tr)
    T = unit_accumulation_time(env, 0)
    total = cumulative_conductance(env, 0, 0.0, tr.t_max)
    if total < 1.0:
        assert T is UNREACHED
    elif T:
        assert abs(cumulative_conductance(env, 0, 0.0, T) - 1.0) <= 2.0 ** -40
        assert cumulative_conductance(env, 0, 0.0, T * (1 - 1e-9) - 1e-12) < 1.0


@settings(max_examples=50)
@given(pieces, st.floats(-2, 2), st.integers(-3, 3), st.floats(-2, 2), st.integers(-3, 3))
def test_composed_shifts_equal_summed_offsets(pcs, u1, z1, u2, z2):
    tr = build(pcs)
    env = uniform_edges(tr, 5, periodic=True)
    a = shift(shift(env, u1, z1), u2, z2)
    b = shift(env, u1 + u2, z1 + z2)
    for t in np.linspace(tr.t_min + 2.0, tr.t_max - 2.0, 5) if tr.t_max > 4.5 else []:
        for x in range(5):
            if a.covers(t, x) and b.covers(t, x):
                assert conductance_at(a, t, x) == conductance_at(b, t, x)
