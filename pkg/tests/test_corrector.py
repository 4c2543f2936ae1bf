import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from degen_rwre.corrector import (
    CorrectorEstimator,
    averaged_conductance,
    build_psi_chi,
    cocycle_check,
    corrector_field,
    dirichlet_certificates,
    harmonicity_check,
    heat_residual,
    phi_average,
    phi_eps,
    prop_constant_integrals,
    sigma2_estimate,
    truncated_pair,
)
from degen_rwre.errors import CertificateFailure, ValidationError

from conftest import alternating_env, constant_env, percolation_env


def test_homogeneous_density_is_one(env_const):
    f = corrector_field(env_const, 0.1)
    assert f.budget["method"] == "homogeneous"
    assert f.phi(0.3, 5) == 1.0
    assert f.chi_eps(0.3, 5) == 0.0
    assert f.psi(2.0, -3) == -3.0


@pytest.mark.parametrize("eps", [0.5, 0.1, 0.02])
@pytest.mark.parametrize("name", ["alternating", "percolation"])
def test_density_has_unit_mean(battery, name, eps):
    f = corrector_field(battery[name], eps)
    spacetime, at_zero = phi_average(f)
    assert spacetime == pytest.approx(1.0, abs=1e-6)
    assert at_zero == pytest.approx(1.0, abs=1e-6)
    assert f.phi_row(0.0).min() > 0


def test_density_depends_on_eps(env_alt):
    rows = [corrector_field(env_alt, e).phi_row(0.0) for e in (0.5, 0.1, 0.02)]
    assert np.abs(rows[0] - rows[1]).max() > 1e-3
    assert np.abs(rows[1] - rows[2]).max() > 1e-3
    # and is not flat: the environment is genuinely inhomogeneous
    assert np.ptp(rows[2]) > 0.1


@pytest.mark.parametrize("eps", [0.5, 0.1])
def test_kernel_route_matches_propagator(env_alt, eps):
    direct = phi_eps(env_alt, eps, site=3, t=0.4, method="kernel")
    assert direct == pytest.approx(corrector_field(env_alt, eps).phi(0.4, 3), abs=1e-9)


def test_unknown_phi_method(env_alt):
    with pytest.raises(ValidationError):
        phi_eps(env_alt, 0.1, method="euler")


@pytest.mark.parametrize("name", ["alternating", "percolation"])
def test_full_cocycle_identity(battery, name):
    assert cocycle_check(battery[name], 0.1) < 1e-8


def test_truncated_pair_closed_form_on_constant(env_const):
    eps = 0.1
    for n in (1, 5, 20):
        phi, chi = truncated_pair(env_const, eps, n)
        np.testing.assert_allclose(chi, 0.0, atol=1e-13)
        np.testing.assert_allclose(phi, 1 - (2 / (2 + eps)) ** n, atol=1e-12)
        assert cocycle_check(env_const, eps, levels=n) == pytest.approx(
            (2 / (2 + eps)) ** (n + 1), abs=1e-12)


def test_truncated_residual_decays_to_full(env_alt):
    res = [cocycle_check(env_alt, 0.1, levels=n) for n in (1, 5, 20, 80)]
    assert all(a > b for a, b in zip(res, res[1:]))
    assert res[-1] < 1e-3


@pytest.mark.parametrize("name", ["alternating", "percolation"])
def test_heat_equation_residual(battery, name):
    f = corrector_field(battery[name], 0.1)
    assert heat_residual(f)["max_residual"] < 1e-6


def test_eps_free_residual_shrinks_with_eps(env_alt):
    coarse = heat_residual(corrector_field(env_alt, 0.1), drop_eps=True)["max_residual"]
    fine = heat_residual(corrector_field(env_alt, 0.01), drop_eps=True)["max_residual"]
    assert fine < coarse / 5


def test_harmonicity_within_eps_bias(env_alt):
    out = harmonicity_check(corrector_field(env_alt, 0.02), 3.0,
                            coarse=corrector_field(env_alt, 0.04))
    assert out["pass"]
    assert abs(out["discrepancy"]) < 0.02


def test_invariant_density_is_exactly_harmonic(env_alt):
    f = corrector_field(env_alt, 0.0)
    assert f.budget["method"] == "invariant"
    out = harmonicity_check(f, 3.0)
    assert abs(out["discrepancy"]) < 1e-10


def test_zero_eps_needs_time_period():
    from degen_rwre.percolation import Exponential, InterarrivalModel, generate_environment

    model = InterarrivalModel.renewal(Exponential(1.0), Exponential(1.0))
    env = generate_environment(model, 4, (0.0, 50.0), periodic=True, seed=1)
    with pytest.raises(ValidationError):
        corrector_field(env, 0.0)
    with pytest.raises(ValidationError):
        corrector_field(env, 0.1)          # window shorter than 40 / eps


def test_finite_window_reports_tail(env_alt):
    from degen_rwre.percolation import Exponential, InterarrivalModel, generate_environment

    model = InterarrivalModel.renewal(Exponential(1.0), Exponential(1.0))
    env = generate_environment(model, 4, (0.0, 120.0), periodic=True, seed=1)
    f = corrector_field(env, 0.5)
    assert f.budget["laplace_tail"] == pytest.approx(4 * math.exp(-40.0))
    assert f.budget["valid_until"] == pytest.approx(40.0)
    assert f.phi_row(10.0).mean() == pytest.approx(1.0, abs=1e-6)


# -- averaged conductance ------------------------------------------------------


def quad_averaged(env, x, t, alpha, horizon):
    knots = np.concatenate(([t], env.knots_between(x, t, t + horizon), [t + horizon]))
    total = 0.0
    for a, c in zip(knots[:-1], knots[1:]):
        b = env.conductance_at(0.5 * (a + c), x)
        total += b * integrate.quad(lambda s: (1 + s - t) ** -alpha, a, c, epsabs=1e-14)[0]
    return total


def test_averaged_conductance_constant():
    env = constant_env()
    assert averaged_conductance(env, 0, 0.0, 4.0) == pytest.approx(1 / 3, abs=1e-14)


@pytest.mark.parametrize("x,t", [(0, 0.3), (3, 1.25), (5, 0.0)])
def test_averaged_conductance_against_quadrature(env_alt, x, t):
    horizon = 300.0
    truncated = averaged_conductance(env_alt, x, t, 4.0, T_h=horizon, with_budget=True)
    assert truncated["value"] == pytest.approx(quad_averaged(env_alt, x, t, 4.0, horizon),
                                               abs=1e-12)
    full = averaged_conductance(env_alt, x, t, 4.0)
    assert 0 <= full - truncated["value"] <= truncated["tail_bound"]


def test_averaged_conductance_lemma_bound(env_perc):
    for x in range(6):
        for t in (0.0, 1.7, 4.2):
            out = averaged_conductance(env_perc, x, t, 4.0, with_budget=True)
            assert out["lemma_bound_holds"]
            assert out["value"] >= (1 + out["unit_time"]) ** -4.0


def test_averaged_conductance_rejects_bad_alpha(env_alt):
    with pytest.raises(ValidationError):
        averaged_conductance(env_alt, 0, 0.0, 1.0)
    with pytest.raises(ValidationError):
        averaged_conductance(env_alt, 0, 0.0, 0.0, T_h=10.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(3.2, 12.0))
def test_kernel_integrals_against_quadrature(alpha):
    k = lambda t: (1 + t) ** -alpha
    I0, I2, IK = prop_constant_integrals(alpha)
    assert I0 == pytest.approx(integrate.quad(k, 0, np.inf)[0], rel=1e-8)
    assert I2 == pytest.approx(integrate.quad(lambda t: t * t * k(t), 0, np.inf)[0], rel=1e-6)
    tail = lambda t: (1 + t) ** (1 - alpha) / (alpha - 1)
    assert IK == pytest.approx(integrate.quad(lambda t: t * tail(t), 0, np.inf)[0], rel=1e-6)


def test_kernel_integrals_at_four():
    np.testing.assert_allclose(prop_constant_integrals(4.0), (1 / 3, 1 / 3, 1 / 6))
    with pytest.raises(ValidationError):
        prop_constant_integrals(3.0)


# -- certificates, psi and sigma^2 ----------------------------------------------


@pytest.mark.parametrize("name", ["constant", "alternating", "percolation"])
def test_certificates_hold(battery, name):
    rep = dirichlet_certificates(battery[name], [0.5, 0.1], alpha=4.0)
    assert rep["all_pass"]
    for row in rep["rows"]:
        assert row["avg_b_phi2"] <= row["avg_b"] * (1 + 1e-10)


def test_certificate_failure_raises(monkeypatch, env_alt):
    import degen_rwre.corrector as mod

    monkeypatch.setattr(mod, "prop_constant_integrals", lambda a: (0.0, 0.0, 0.0))
    with pytest.raises(CertificateFailure):
        mod.dirichlet_certificates(env_alt, [0.5], raise_on_failure=True)


@pytest.mark.parametrize("name", ["alternating", "percolation"])
def test_psi_normalisation_and_cocycle(battery, name):
    f, grid, diag = build_psi_chi(battery[name], 0.1)
    assert diag["psi_origin"] == 0.0
    assert diag["avg_psi01"] == pytest.approx(1.0, abs=1e-6)
    assert diag["cocycle_residual"] < 1e-8
    # the raw identity is off by the eps-defect, which is not small
    assert diag["cocycle_raw"] > 1e-4
    np.testing.assert_allclose(grid[:, 5], grid[:, 4] - grid[:, 1])


def test_invariant_psi_is_an_exact_cocycle(env_alt):
    _, _, diag = build_psi_chi(env_alt, 0.0)
    assert diag["cocycle_raw"] < 1e-8


def test_sigma2_homogeneous():
    assert sigma2_estimate(constant_env(0.5))["sigma2"] == 1.0


def test_sigma2_alternating_extrapolation(env_alt):
    out = sigma2_estimate(env_alt)
    assert 0 < out["sigma2"] < 1.0          # at most 2 * mean conductance
    exact = 2 * phi_average_b(corrector_field(env_alt, 0.0))
    assert out["sigma2"] == pytest.approx(exact, abs=max(3 * out["error"], 1e-4))


def phi_average_b(f):
    from degen_rwre.corrector import _period_average

    env = f._sol.env

    def fn(ts, ys, s):
        phi = ys[:, s.iv].reshape(len(ts), s.nl, s.L).sum(1)
        b = np.stack([env.conductances(x, ts) for x in range(s.L)], axis=1)
        return b * phi ** 2

    return _period_average(f, fn)


def test_estimator_surface(env_alt):
    est = CorrectorEstimator(epsilon=0.02, epsilon_fine=0.01).fit(env_alt)
    assert est.phi_mean_ == pytest.approx(1.0, abs=1e-6)
    assert est.sigma2_ == pytest.approx(sigma2_estimate(env_alt)["sigma2"])
    psi = est.transform([[0.0, 0.0], [0.5, 2.0]])
    assert psi[0] == 0.0
    assert psi[1] == pytest.approx(est.field_.psi(0.5, 2))
    assert est.get_params() == {"epsilon": 0.02, "epsilon_fine": 0.01}
    with pytest.raises(ValidationError):
        est.transform([1.0, 2.0])


def test_corrector_needs_periodic_environment():
    from degen_rwre.percolation import Exponential, InterarrivalModel, generate_environment

    model = InterarrivalModel.renewal(Exponential(1.0), Exponential(1.0))
    env = generate_environment(model, 4, (0.0, 50.0), seed=1)
    with pytest.raises(ValidationError):
        corrector_field(env, 0.1)
    with pytest.raises(ValidationError):
        dirichlet_certificates(env, [0.1])
