import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from conftest import const_k, phi1_const
from regimeopt.dual import (NumericalFailure, a_func, a_min_closed, assemble_dual, generator,
                            generator_f, optimal_gamma, solve_after_switch, solve_dual,
                            solve_phi0_lsmc, solve_phi0_ode, solve_phi1_closed, solve_phi1_mc)
from regimeopt.market import CoefficientFn, ModelError, make_model

# --------------------------------------------------------------------------
# generator and the jump-control minimisation


def test_generator_zero_coefficients_is_minus_one():
    y = np.array([0.5, 1.0, 3.0])
    assert np.all(generator(0.5, 0.0, 0.0, 0.0, y, 0.7, 0.2) == -1.0)


@given(st.floats(0.1, 0.9), st.floats(0.0, 0.1), st.floats(-1, 1), st.floats(0, 1),
       st.floats(0.1, 5), st.floats(-2, 2))
def test_generator_jump_terms_cancel_at_zero_jump(p, r, theta, lam, y, z):
    q = p / (p - 1)
    expected = (q * r - 0.5 * q * (q - 1) * theta**2) * y + q * theta * z - 1
    assert generator(p, r, theta, lam, y, z, 0.0) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_generator_term_by_term():
    p, r, theta, lam, y, z, u = 0.5, 0.02, 0.2, 0.1, 1.0, 0.0, 0.5
    q = -1.0
    lin = q * r - 0.5 * q * (q - 1) * theta**2 + (1 - q) * lam
    jump = (1 - q) * lam * (y + u) ** 0.5 * y**0.5
    expected = lin * y + q * theta * z - jump - 1
    assert generator(p, r, theta, lam, y, z, u) == pytest.approx(expected, abs=1e-15)
    # lambda contribution 2 * 0.1 * (1 - 1.5^0.5)
    assert (generator(p, r, theta, lam, y, z, u) - generator(p, r, theta, 0.0, y, z, u)
            == pytest.approx(2 * 0.1 * (1 - 1.5**0.5), abs=1e-15))


def test_generator_domain_errors(ref):
    with pytest.raises(ModelError):
        generator(0.5, 0, 0, 0, 0.0, 0, 0)
    with pytest.raises(ModelError):
        generator(0.5, 0, 0, 0, 1.0, 0, -1.0)
    assert generator_f(ref, 0.3, 1.0, 0.0, 0.0, switch_time=0.1) == pytest.approx(
        generator(0.5, 0.05, 0.08, 0.0, 1.0, 0.0, 0.0))


def test_a_func_at_zero_and_domain():
    assert a_func(0.0, 2.0, 0.7, 0.4) == pytest.approx(2.7)
    with pytest.raises(ModelError):
        a_func(-1.0, 1.0, 0.0, 0.5)


def test_a_func_symmetric_case_minimised_at_zero():
    x = np.linspace(-0.5, 2, 501)
    a = a_func(x, 1.3, 0.0, 0.5)
    assert np.allclose(a, 1.3 * (1 / (1 + x) + x))
    assert x[np.argmin(a)] == pytest.approx(0.0, abs=1e-12)
    assert optimal_gamma(1.3, 0.0, 0.5) == 0.0


def _golden_argmin(phi, tilde, p):
    res = minimize_scalar(lambda x: float(a_func(x, phi, tilde, p)), bounds=(-1 + 1e-9, 10),
                          method="bounded", options={"xatol": 1e-12})
    return res.x, res.fun


def test_optimal_gamma_reference_point():
    assert optimal_gamma(1.0, 3.0, 0.5) == pytest.approx(1.0, abs=1e-15)
    x, _ = _golden_argmin(1.0, 3.0, 0.5)
    assert x == pytest.approx(1.0, abs=1e-6)


@given(st.floats(0.2, 5.0), st.floats(-0.6, 3.0), st.floats(0.1, 0.9))
def test_optimal_gamma_matches_numerical_minimiser(phi, tilde_frac, p):
    tilde = tilde_frac * phi
    g = optimal_gamma(phi, tilde, p)
    x, fmin = _golden_argmin(phi, tilde, p)
    assert a_func(g, phi, tilde, p) <= fmin + 1e-10 * max(1, abs(fmin))
    if -1 < x < 10 - 1e-6:
        assert g == pytest.approx(x, abs=1e-4)
    for d in (0.01, -0.01):
        if g + d > -1:
            assert a_func(g, phi, tilde, p) <= a_func(g + d, phi, tilde, p)


@given(st.floats(0.1, 5.0), st.floats(-0.9, 4.0), st.floats(0.05, 0.95),
       st.lists(st.floats(-0.999, 10.0), min_size=50, max_size=50))
def test_gamma_star_is_global_minimiser(phi, tilde_frac, p, xs):
    tilde = tilde_frac * phi
    a_star = a_func(optimal_gamma(phi, tilde, p), phi, tilde, p)
    a = a_func(np.array(xs), phi, tilde, p)
    assert np.all(a_star <= a + 1e-10 * np.maximum(1.0, np.abs(a)))
    assert a_star == pytest.approx(a_min_closed(phi, tilde, p), rel=1e-10, abs=1e-10)


def test_optimal_gamma_domain():
    with pytest.raises(ModelError):
        optimal_gamma(0.0, 1.0, 0.5)
    with pytest.raises(ModelError):
        optimal_gamma(1.0, -1.0, 0.5)


# --------------------------------------------------------------------------
# after the switch


def test_phi1_constant_k_closed_form():
    m = make_model(p=0.5, T=1.0, r0=0.05, r1=0.05, nu=0.1, sigma=0.25, lam=0.0)
    k = const_k(0.5, 0.05, 0.2)
    assert k == pytest.approx(-0.09)
    exact = 1 / k + (1 - 1 / k) * math.exp(-k)
    assert exact == pytest.approx(2.140555, abs=1e-6)
    t, v = solve_phi1_closed(m, 0.0)
    assert abs(v[0] - exact) <= 1e-10
    assert v[-1] == 1.0
    assert np.allclose(v, phi1_const(k, 1 - t), rtol=0, atol=1e-12)


def test_phi1_rk4_oracle_fine_step():
    m = make_model(p=0.5, T=1.0, r0=0.05, r1=0.05, nu=0.1, sigma=0.25, lam=0.0)
    k, h, y = -0.09, 1e-5, 1.0
    f = lambda y: k * y - 1.0
    for _ in range(100_000):
        k1 = f(y); k2 = f(y - 0.5 * h * k1); k3 = f(y - 0.5 * h * k2); k4 = f(y - h * k3)
        y -= h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert solve_phi1_closed(m, 0.0)[1][0] == pytest.approx(y, abs=1e-10)


def test_phi1_zero_rate_is_linear(zero_model):
    t, v = solve_phi1_closed(zero_model, 0.25, n_steps=50)
    assert np.allclose(v, 1 + (1 - t), atol=1e-14)


def test_phi1_piecewise_matches_scipy():
    r1 = CoefficientFn.piecewise([0.4], [0.01, 0.06])
    sigma = CoefficientFn.piecewise([0.7], [0.2, 0.35])
    m = make_model(p=0.3, T=1.5, r0=0.02, r1=r1, nu=0.08, sigma=sigma, lam=0.1)
    k = lambda t: float(const_k(0.3, m.r1(t), m.theta(t, "post")))
    # integrate each smooth piece separately so the oracle is not limited by kinks
    y, tt = 1.0, 1.5
    for a in (0.7, 0.4, 0.0):
        sol = solve_ivp(lambda t, y: k(0.5 * (a + tt)) * y - 1, (tt, a), [y], rtol=1e-13, atol=1e-13)
        y, tt = sol.y[0, -1], a
    assert solve_phi1_closed(m, 0.0, n_steps=1000)[1][0] == pytest.approx(y, rel=1e-10)


def test_after_switch_family_affine_in_u():
    r1 = CoefficientFn.affine_u(0.02, 0.05)
    m = make_model(p=0.5, T=1.0, r0=0.02, r1=r1, nu=0.07, sigma=0.25, lam=0.3)
    after = solve_after_switch(m, 200)
    for j in (0, 50, 120, 199):
        u = after.grid_t[j]
        k = const_k(0.5, 0.02 + 0.05 * u, (0.07 - 0.02 - 0.05 * u) / 0.25)
        assert np.allclose(after.values[j, j:], phi1_const(k, 1 - after.grid_t[j:]), atol=1e-12)
        assert np.all(np.isnan(after.values[j, :j]))
    assert np.all(after.values[:, -1] == 1.0)


def test_phi1_bounds_hold_on_random_models():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = make_model(p=rng.uniform(0.1, 0.9), T=rng.uniform(0.2, 3), r0=0.01,
                       r1=rng.uniform(0, 0.1), nu=rng.uniform(-0.1, 0.2),
                       sigma=rng.uniform(0.1, 0.5), lam=0.2)
        after = solve_after_switch(m, 100)
        v = after.values[~np.isnan(after.values)]
        assert v.min() >= 1 - 1e-12
        assert v.max() <= after.bound


def test_phi1_mc_within_3se_and_zero_variance(zero_model):
    m = make_model(p=0.4, T=1.2, r0=0.02, r1=0.04, nu=0.09, sigma=0.22, lam=0.1)
    est, se = solve_phi1_mc(m, 0.3, 20_000, 200, seed=5)
    exact = solve_phi1_closed(m, 0.3)[1][0]
    assert abs(est - exact) <= 3 * se
    est0, se0 = solve_phi1_mc(zero_model, 0.25, 1000, 50)
    assert se0 <= 1e-15
    assert est0 == pytest.approx(1.75, abs=1e-12)
    with pytest.raises(ModelError):
        solve_phi1_mc(m, 0.3, n_paths=99)


def test_phi1_mc_se_scales_with_root_n():
    m = make_model(p=0.4, T=1.0, r0=0.02, r1=0.04, nu=0.12, sigma=0.2, lam=0.1)
    se1 = np.mean([solve_phi1_mc(m, 0.0, 10_000, 50, seed=s)[1] for s in range(5)])
    se2 = np.mean([solve_phi1_mc(m, 0.0, 20_000, 50, seed=s)[1] for s in range(5)])
    assert se2 / se1 == pytest.approx(1 / math.sqrt(2), rel=0.2)


# --------------------------------------------------------------------------
# before the switch


def _phi0_oracle_euler(p, r0, r1, nu, sigma, lam, T, h):
    """Explicit Euler for the before-switch ODE with constant coefficients."""
    q = p / (p - 1)
    k1 = const_k(p, r1, (nu - r1) / sigma)
    c = const_k(p, r0, (nu - r0) / sigma) + (1 - q) * lam
    n = int(round(T / h))
    y = 1.0
    for i in range(n, 0, -1):
        t = i * h
        d = phi1_const(k1, T - t)
        y -= h * (c * y - (1 - q) * lam * d ** (1 - p) * y**p - 1)
    return y


def test_phi0_reference_against_richardson_euler(ref, ref_dual):
    args = (0.5, 0.02, 0.05, 0.07, 0.25, 0.3, 1.0)
    e1 = _phi0_oracle_euler(*args, 2e-5)
    e2 = _phi0_oracle_euler(*args, 1e-5)
    oracle = 2 * e2 - e1
    assert abs(ref_dual.phi0[0] - oracle) <= 1e-6


def test_phi0_matches_scipy(ref, ref_dual):
    p, q, lam = 0.5, -1.0, 0.3
    k1 = const_k(p, 0.05, 0.08)
    c = const_k(p, 0.02, 0.2) + (1 - q) * lam
    rhs = lambda t, y: c * y - (1 - q) * lam * phi1_const(k1, 1 - t) ** (1 - p) * y**p - 1
    sol = solve_ivp(rhs, (1.0, 0.0), [1.0], rtol=1e-13, atol=1e-13, dense_output=True)
    assert np.allclose(ref_dual.phi0, sol.sol(ref_dual.grid_t)[0], rtol=1e-10, atol=0)


def test_phi0_zero_intensity_zero_rate(zero_model):
    d = solve_dual(zero_model, 1000)
    assert abs(d.phi0[0] - 2.0) <= 1e-10
    assert np.allclose(d.phi0, 2 - d.grid_t, atol=1e-10)


def test_phi0_same_regimes_equals_diagonal(same_regime_model):
    d = solve_dual(same_regime_model, 500)
    assert np.max(np.abs(d.phi0 - d.phi1_diag)) <= 1e-8
    assert np.max(np.abs(d.phi_tilde_pre)) <= 1e-8
    assert np.max(np.abs(d.gamma_star_pre)) <= 1e-8


def test_phi0_floor_and_terminal(ref_dual, ref):
    assert ref_dual.phi0[-1] == 1.0
    assert ref_dual.phi0.min() >= ref.m_floor


def test_phi0_grid_mismatch(ref):
    after = solve_after_switch(ref, 100)
    with pytest.raises(ModelError):
        solve_phi0_ode(ref, after, n_steps=200)


def test_phi0_clamp_mode_inactive_when_floor_holds(ref):
    after = solve_after_switch(ref, 200)
    a = solve_phi0_ode(ref, after)
    b = solve_phi0_ode(ref, after, clamp=True)
    assert np.array_equal(a.values, b.values)
    assert b.diagnostics["clamp"]


def test_phi0_floor_violation_retries_then_fails(ref, monkeypatch):
    import regimeopt.dual as dual_mod

    calls = []

    def always_bad(model, grid, diag, diag_mid, clamp):
        calls.append(grid.size)
        return np.ones_like(grid), 0

    monkeypatch.setattr(dual_mod, "_rk4_phi0", always_bad)
    with pytest.raises(NumericalFailure):
        solve_phi0_ode(ref, solve_after_switch(ref, 50))
    assert calls == [51, 101, 201, 401, 801]


def test_rk4_fourth_order(ref):
    errs = []
    exact = solve_dual(ref, 4000).phi0[0]
    for n in (25, 50, 100):
        errs.append(abs(solve_dual(ref, n).phi0[0] - exact))
    assert errs[0] / errs[1] == pytest.approx(16, rel=0.25)
    assert errs[1] / errs[2] == pytest.approx(16, rel=0.25)


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_lsmc_within_one_percent(ref, ref_dual, degree):
    sol = solve_phi0_lsmc(ref, ref_dual.after, 50_000, 50, degree, seed=1)
    assert abs(sol.values[0] / ref_dual.phi0[0] - 1) <= 0.01
    assert sol.values[-1] == 1.0
    assert len(sol.diagnostics["degrees"]) == 50


def test_lsmc_zero_case(zero_model):
    d = solve_dual(zero_model, 100)
    sol = solve_phi0_lsmc(zero_model, d.after, 5_000, 20, 2, seed=0)
    # only the 1e-8 ridge shrinkage separates the estimate from 1 + T
    assert sol.values[0] == pytest.approx(2.0, abs=1e-6)


def test_lsmc_bias_shrinks_with_step(ref, ref_dual):
    b = [abs(solve_phi0_lsmc(ref, ref_dual.after, 50_000, n, 1, seed=2).values[0]
             - ref_dual.phi0[0]) for n in (10, 40)]
    assert b[1] < b[0]


def test_lsmc_reduces_degree_when_ill_conditioned(ref, ref_dual):
    sol = solve_phi0_lsmc(ref, ref_dual.after, 2_000, 10, 6, seed=0)
    assert max(sol.diagnostics["condition_numbers"]) <= 1e10 or min(sol.diagnostics["degrees"]) < 6
    assert min(sol.diagnostics["degrees"]) < 6


def test_lsmc_rejects_small_samples(ref, ref_dual):
    with pytest.raises(ModelError):
        solve_phi0_lsmc(ref, ref_dual.after, 50)


# --------------------------------------------------------------------------
# assembly


def test_assembly_indicator_logic(ref):
    d = solve_dual(ref, 100)
    n = 100
    no_switch = np.array([n + 1])
    for i in (0, 37, 100):
        assert d.phi(i, no_switch)[0] == d.phi0[i]
    at_zero = np.array([0])
    assert np.allclose([d.phi(i, at_zero)[0] for i in range(n + 1)], d.after.values[0])
    j = np.array([40])
    assert d.phi(39, j)[0] == d.phi0[39]
    assert d.phi(40, j)[0] == d.after.values[40, 40]
    assert d.phi_minus(40, j)[0] == d.phi0[40]
    assert d.phi_minus(40, j)[0] + d.phi_tilde(40, j)[0] == pytest.approx(d.after.values[40, 40])
    assert d.gamma_star(41, j)[0] == 0.0
    assert d.gamma_star(40, j)[0] == d.gamma_star_pre[40]


def test_assembly_rejects_mismatched_grids(ref):
    a = solve_after_switch(ref, 100)
    b = solve_phi0_ode(ref, solve_after_switch(ref, 50))
    with pytest.raises(ModelError):
        assemble_dual(b, a, 0.5)


def test_jump_total_at_least_one(ref_dual):
    assert ref_dual.phi1_diag.min() >= 1 - 1e-12
    assert np.min(ref_dual.phi0) >= min(ref_dual.before.m_floor, 1.0)


def test_reference_values(ref_dual):
    assert ref_dual.phi0[0] == pytest.approx(2.0917511204, abs=1e-9)
    assert ref_dual.gamma_star_pre[0] == pytest.approx(-0.001194, abs=2e-6)


def test_rows_layout(ref_dual):
    rows = ref_dual.rows()
    assert rows.shape == (1001, 6)
    assert np.allclose(rows[:, 4], ref_dual.gamma_star_pre)


def test_breakpoints_off_grid_keep_fourth_order():
    r0 = CoefficientFn.piecewise([0.37], [0.01, 0.04])
    lam = CoefficientFn.piecewise([0.61], [0.5, 0.2])
    m = make_model(p=0.4, T=1.0, r0=r0, r1=0.06, nu=0.09, sigma=0.2, lam=lam)
    exact = solve_dual(m, 3000).phi0[0]
    errs = [abs(solve_dual(m, n).phi0[0] - exact) for n in (20, 40, 80)]
    assert errs[0] / errs[1] == pytest.approx(16, rel=0.3)
    assert errs[1] / errs[2] == pytest.approx(16, rel=0.3)
