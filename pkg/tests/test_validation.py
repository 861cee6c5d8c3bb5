import json
import math

import numpy as np
import pytest

from regimeopt import SimConfig, make_model, solve_dual
from regimeopt.dual import BeforeSwitchSolution, DualSolution
from regimeopt.market import ModelError
from regimeopt.strategy import OptimalStrategy, primal_from_dual
from regimeopt import validation as v

SMALL = SimConfig(20_000, 50, 42)


@pytest.fixture(scope="module")
def small_ref(ref):
    d = solve_dual(ref, SMALL.n_steps)
    return d, OptimalStrategy.from_dual(ref, d)


def test_martingale_family_trivial_case(zero_model):
    d = solve_dual(zero_model, 50)
    rep = v.check_martingale_family(zero_model, d, SimConfig(500, 50, 1))
    assert rep.passed
    assert rep.statistic <= 1e-3


def test_martingale_family_reference_small(ref, small_ref):
    d, _ = small_ref
    rep = v.check_martingale_family(ref, d, SMALL)
    assert rep.passed, rep.details
    assert rep.details["shifted"]["rise_at_T_se"] >= 2.0
    assert len(rep.details["checkpoints"]) == 11


def test_martingale_family_rejects_inadmissible_before_simulating(ref, small_ref, monkeypatch):
    d, _ = small_ref
    monkeypatch.setattr(v, "map_blocks", lambda *a: pytest.fail("simulated"))
    fam = {"optimal": d.gamma_star_pre, "bad": np.full(d.grid_t.size, -1.0)}
    with pytest.raises(ModelError):
        v.check_martingale_family(ref, d, SMALL, fam)
    with pytest.raises(ModelError):
        v.check_martingale_family(ref, d, SMALL, {"other": d.gamma_star_pre})


def test_martingale_family_flags_decreasing_control(ref, small_ref):
    """A control that is not optimal but tagged as such fails the flatness test."""
    d, _ = small_ref
    fam = {"optimal": d.gamma_star_pre + 1.0}
    assert not v.check_martingale_family(ref, d, SMALL, fam).passed


def test_duality_gap_small(ref, small_ref):
    d, s = small_ref
    rep = v.check_duality_gap(ref, d, s, SMALL)
    assert rep.passed, rep.details
    assert rep.details["suboptimal_margin"] > 2 * rep.details["suboptimal_margin_se"]


def test_duality_gap_zero_case_exact(zero_model):
    d = solve_dual(zero_model, 50)
    s = OptimalStrategy.from_dual(zero_model, d)
    rep = v.check_duality_gap(zero_model, d, s, SimConfig(200, 50, 0))
    assert rep.passed
    assert rep.details["primal_estimate"] == pytest.approx(2 * math.sqrt(2), abs=1e-9)


def test_primal_estimate_homogeneous_in_wealth(ref, small_ref):
    d, _ = small_ref
    est = []
    for x0 in (1.0, 3.0):
        s = OptimalStrategy.from_dual(ref, d, x0)
        est.append(v.check_duality_gap(ref, d, s, SMALL).details["primal_estimate"])
    assert est[1] == pytest.approx(3.0**0.5 * est[0], rel=1e-12)


def test_budget_identity_small(ref, small_ref):
    d, s = small_ref
    rep = v.check_budget_identity(ref, d, s, SMALL)
    assert rep.passed, rep.details
    assert all(rep.details[f"random_{k}"]["pass"] for k in range(4))


def test_dpp_reference_small(ref, small_ref):
    d, _ = small_ref
    rep = v.check_dpp_infimum(ref, d, SMALL)
    assert rep.passed, rep.details
    assert len(rep.details["estimates"]) == 7


def test_dpp_no_intensity_all_equal():
    m = make_model(p=0.5, T=1, r0=0.02, r1=0.05, nu=0.07, sigma=0.25, lam=0.0)
    d = solve_dual(m, 20)
    rep = v.check_dpp_infimum(m, d, SimConfig(2000, 20, 0))
    vals = list(rep.details["estimates"].values())
    assert rep.passed
    assert max(vals) - min(vals) == 0.0


def test_dpp_same_regime_minimum_at_zero(same_regime_model):
    d = solve_dual(same_regime_model, 50)
    rep = v.check_dpp_infimum(same_regime_model, d, SMALL)
    est = rep.details["estimates"]
    assert rep.passed
    assert abs(rep.details["gamma_star_0"]) <= 1e-8
    others = {k: e for k, e in est.items() if not k.startswith(("gamma", "const_+0", "const_gamma0"))}
    assert est["const_+0"] <= min(others.values())


def test_dpp_rejects_inadmissible(ref, small_ref):
    d, _ = small_ref
    with pytest.raises(ModelError):
        v.check_dpp_infimum(ref, d, SMALL, gamma_grid=(-1.0, 0.0))


def test_bounds_and_consistency(ref, ref_dual, same_regime_model):
    assert v.check_bounds_and_consistency(ref, ref_dual).passed
    rep = v.check_bounds_and_consistency(same_regime_model, solve_dual(same_regime_model, 400))
    assert rep.passed
    assert rep.details["max_phi0_minus_diag"] <= 1e-8


def test_bounds_detect_floor_violation(ref, ref_dual):
    b = ref_dual.before
    broken = BeforeSwitchSolution(b.grid_t, np.where(b.grid_t == 0.5, 0.1, b.values), b.zeta0,
                                  b.m_floor)
    rep = v.check_bounds_and_consistency(ref, DualSolution(broken, ref_dual.after, ref.p))
    assert not rep.passed
    assert not rep.details["phi0_floor_ok"]


def test_residual_zero_case_machine_precision(zero_model):
    d = solve_dual(zero_model, 500)
    res = v.primal_residuals(zero_model, d, primal_from_dual(d))
    residual, trunc = res["pre"]
    h = d.grid_t[1]
    assert residual <= h**2 / 6 * (3 / 8) * 1.0**-2.5 * 1.01
    assert residual <= 10 * trunc
    # exact derivative of (2 - t)^(1/2) is -(1/2)(2 - t)^(-1/2) = -(1 - p) Psi^q
    t = d.grid_t
    assert np.allclose(v.primal_drift(zero_model, t, (2 - t) ** 0.5), -0.5 * (2 - t) ** -0.5,
                       rtol=1e-14)


def test_residual_reference_and_shrink_ratio(ref):
    res = []
    for n in (200, 400):
        d = solve_dual(ref, n)
        rep = v.check_primal_bsde_residual(ref, d)
        assert rep.passed, rep.details
        res.append(v.primal_residuals(ref, d, primal_from_dual(d)))
    for key in res[0]:
        if key == "pre_without_compensator":
            continue
        assert res[0][key][0] / res[1][key][0] == pytest.approx(4.0, rel=0.1)


def test_residual_without_compensator_does_not_vanish(ref):
    d = solve_dual(ref, 400)
    res = v.primal_residuals(ref, d, primal_from_dual(d))
    assert res["pre_without_compensator"] > 100 * res["pre"][0]


def test_switch_time_law(ref):
    rep = v.check_switch_time_law(ref, 100_000, 42)
    assert rep.passed
    assert rep.details["survival_at_T"] == pytest.approx(math.exp(-0.3), abs=0.005)


def test_scheme_cross_validation_small(ref, ref_dual):
    rep = v.check_scheme_cross_validation(ref, ref_dual, 20_000, 50, (0, 2), 42, 3, 10_000)
    assert rep.passed, rep.details
    assert len(rep.details["phi1_mc"]) == 3


def test_report_json_deterministic_and_finite():
    reps = [v.CheckReport("a", float("inf"), 1.0, True, 10, 1, None, {"x": np.float64("nan")}),
            v.CheckReport("b", 0.5, 1.0, False)]
    text = v.report_json(reps)
    assert text == v.report_json(reps)
    data = json.loads(text)
    assert data["all_pass"] is False
    assert data["checks"][0]["statistic"] == "inf"
    assert data["checks"][0]["details"]["x"] == "nan"
    assert "FAIL" in v.report_table(reps)


def test_grid_mismatch_is_structural(ref, ref_dual):
    with pytest.raises(ModelError):
        v.check_martingale_family(ref, ref_dual, SMALL)
