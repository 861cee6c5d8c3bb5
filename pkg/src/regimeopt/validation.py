"""Desk-scale verification of the duality, martingale and consistency properties.

Every check returns a :class:`CheckReport` carrying its statistic, threshold
and sample sizes; nothing here mutates solver outputs. Monte Carlo checks are
deterministic given the model and ``SimConfig.seed``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy import stats

from .dual import DualSolution, NumericalFailure, solve_dual, solve_phi0_lsmc, solve_phi1_closed, solve_phi1_mc
from .market import MarketModel, ModelError, make_model
from .simulate import (SimConfig, _cumtrapz, cumulative_intensity, density_path, dual_gain_path,
                       dual_objective_sample, map_blocks, simulate_default_time, wealth_path_euler)
from .strategy import OptimalStrategy, PrimalSolution, gamma_bounds, primal_from_dual, primal_value

# relative floor for comparisons whose Monte Carlo variance is exactly zero
ZERO_VARIANCE_TOL = 1e-10


@dataclass
class CheckReport:
    name: str
    statistic: float
    threshold: float
    passed: bool
    n_paths: int = 0
    seed: int | None = None
    se: float | None = None
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return _finite(d)


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _tol(se, scale):
    return se + ZERO_VARIANCE_TOL * max(1.0, abs(scale))


def _grid_control(values):
    values = np.asarray(values, dtype=float)
    return lambda state: values[state.i]


def _require_grid(dual: DualSolution, sim: SimConfig):
    if dual.n_steps != sim.n_steps:
        raise ModelError(f"grid mismatch: dual has {dual.n_steps} steps, simulation {sim.n_steps}")


# --------------------------------------------------------------------------
# martingale / submartingale structure


def default_gamma_family(dual: DualSolution, T: float) -> dict[str, np.ndarray]:
    """``gamma*`` plus four admissible perturbations (pre-switch grid values)."""
    g = dual.gamma_star_pre
    t = dual.grid_t
    return {
        "optimal": g,
        "shifted": g + 0.3,
        "scaled": 1.5 * (1.0 + g) - 1.0,
        "time_dependent": g + 0.2 + 0.4 * t / T,
        "sign_flipped": g - 0.4,
    }


def check_martingale_family(model: MarketModel, dual: DualSolution, sim: SimConfig,
                            gamma_list: Mapping[str, np.ndarray] | None = None,
                            optimal: str = "optimal", n_checkpoints: int = 10) -> CheckReport:
    """Mean conditional gains are flat under ``gamma*`` and rise under any other control.

    Under ``gamma*`` the largest deviation of the checkpoint means from
    ``Phi_0`` must stay within 3 SE. For each other control, successive
    checkpoint means may not fall by more than one SE of the increment.
    """
    _require_grid(dual, sim)
    gammas = dict(default_gamma_family(dual, model.T) if gamma_list is None else gamma_list)
    if optimal not in gammas:
        raise ModelError("gamma_list must contain the optimal control")
    for name, g in gammas.items():
        g = np.asarray(g, dtype=float)
        if g.shape != dual.grid_t.shape:
            raise ModelError(f"control {name!r} is not on the dual grid")
        if np.any(g <= -1.0):
            raise ModelError(f"control {name!r} is inadmissible (gamma <= -1)")
    idx = np.unique(np.linspace(0, sim.n_steps, n_checkpoints + 1).round().astype(int))
    controls = {k: _grid_control(v) for k, v in gammas.items()}

    def block(paths):
        out = {}
        for name, ctl in controls.items():
            out[name] = dual_gain_path(ctl, dual, paths, model)[:, idx]
        return out

    res = map_blocks(block, model, sim)
    phi0 = float(dual.phi0[0])
    details, ok = {"checkpoints": dual.grid_t[idx].tolist()}, True
    stat_opt = 0.0
    for name, J in res.items():
        m = J.mean(axis=0)
        se = J.std(axis=0, ddof=1) / np.sqrt(J.shape[0])
        if name == optimal:
            se_eff = se + _tol(0.0, phi0) / 3.0
            z = np.abs(m - phi0) / se_eff
            stat_opt = float(np.max(z))
            passed = bool(stat_opt <= 3.0)
            details[name] = {"means": m.tolist(), "se": se.tolist(), "max_dev_se": stat_opt}
        else:
            inc = np.diff(J, axis=1)
            inc_m = inc.mean(axis=0)
            inc_se = inc.std(axis=0, ddof=1) / np.sqrt(J.shape[0])
            passed = bool(np.all(inc_m >= -inc_se - _tol(0.0, phi0)))
            details[name] = {"means": m.tolist(), "se": se.tolist(),
                             "min_increment_se": float(np.min(inc_m / np.where(inc_se > 0, inc_se, np.inf))),
                             "rise_at_T_se": float((m[-1] - phi0) / se[-1]) if se[-1] > 0 else 0.0}
        details[name]["pass"] = passed
        ok &= passed
    return CheckReport("martingale_family", stat_opt, 3.0, ok, sim.n_paths, sim.seed,
                       float(res[optimal][:, -1].std(ddof=1) / np.sqrt(sim.n_paths)), details)


# --------------------------------------------------------------------------
# duality, budget


def _optimal_consumption(strategy: OptimalStrategy, paths, L):
    return (strategy.eta_star * paths.R * L) ** (1.0 / (strategy.model.p - 1.0))


def primal_objective_sample(strategy: OptimalStrategy, paths) -> np.ndarray:
    """Per-path ``int U(c*) ds + U(X*_T)`` with Euler wealth under ``(pi*, c*)``.

    Leaves ``paths.L`` and ``paths.X`` filled in. An inadmissible path at the
    optimum is a hard failure.
    """
    model = strategy.model
    p = model.p
    L = density_path(strategy.gamma, paths, model)
    paths.L = L
    X, adm = wealth_path_euler(strategy.pi, strategy.c, strategy.x0, paths, model)
    if not adm.all():
        raise NumericalFailure("inadmissible wealth path under the optimal strategy")
    c = _optimal_consumption(strategy, paths, L)
    return _cumtrapz(c**p / p, paths.dt)[:, -1] + X[:, -1] ** p / p


def check_duality_gap(model: MarketModel, dual: DualSolution, strategy: OptimalStrategy,
                      sim: SimConfig) -> CheckReport:
    """Simulated primal objective under ``(pi*, c*)`` equals ``(x^p/p) Phi_0^(1-p)``.

    Also requires the fixed benchmark (no risky position, consumption
    ``x0 / (2 (1 + T))``) to score at least 2 SE of the paired difference lower.
    """
    _require_grid(dual, sim)
    p, x0 = model.p, strategy.x0
    c_sub = x0 / (2.0 * (1.0 + model.T))

    def U(x):
        return x**p / p

    def block(paths):
        opt = primal_objective_sample(strategy, paths)
        paths.X = None
        Xs, adm_s = wealth_path_euler(lambda s: 0.0, lambda s: c_sub, x0, paths, model)
        sub = U(c_sub) * model.T + np.where(adm_s, U(np.maximum(Xs[:, -1], 1e-300)), -np.inf)
        return {"opt": opt, "sub": sub}

    res = map_blocks(block, model, sim)
    V = primal_value(x0, float(dual.phi0[0]), p)
    n = res["opt"].size
    est, se = float(res["opt"].mean()), float(res["opt"].std(ddof=1) / np.sqrt(n))
    diff = res["opt"] - res["sub"]
    d_m, d_se = float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n))
    gap = abs(est - V)
    thr = _tol(3.0 * se, V)
    lower_ok = d_m >= 2.0 * d_se and d_m > 0.0
    return CheckReport("duality_gap", gap, thr, bool(gap <= thr and lower_ok), n, sim.seed, se,
                       {"primal_estimate": est, "dual_value": V,
                        "suboptimal_estimate": float(res["sub"].mean()),
                        "suboptimal_margin": d_m, "suboptimal_margin_se": d_se,
                        "suboptimal_lower": bool(lower_ok)})


def _budget_sample(paths, L, X, c):
    rl = paths.R * L
    return rl[:, -1] * X[:, -1] + _cumtrapz(rl * c, paths.dt)[:, -1]


def check_budget_identity(model: MarketModel, dual: DualSolution, strategy: OptimalStrategy,
                          sim: SimConfig, n_random: int = 4) -> CheckReport:
    """Deflated wealth plus deflated consumption has expectation ``x0`` at the
    optimum and at most ``x0`` for other admissible strategies."""
    _require_grid(dual, sim)
    x0 = strategy.x0
    rng = np.random.default_rng(np.random.SeedSequence(sim.seed, spawn_key=(7,)))
    others = [(float(rng.uniform(-0.5, 2.0)), float(rng.uniform(0.0, 0.5)),
               float(rng.uniform(-0.5, 1.0))) for _ in range(n_random)]

    def block(paths):
        L = density_path(strategy.gamma, paths, model)
        paths.L = L
        X, _ = wealth_path_euler(strategy.pi, strategy.c, x0, paths, model)
        out = {"opt": _budget_sample(paths, L, X, _optimal_consumption(strategy, paths, L))}
        for k, (pi_k, kappa, g) in enumerate(others):
            Lg = density_path(lambda s: g, paths, model)
            paths.X = None
            Xk, adm = wealth_path_euler(lambda s: pi_k, lambda s: kappa * s.X, x0, paths, model)
            ck = kappa * Xk
            out[f"random_{k}"] = np.where(adm, _budget_sample(paths, Lg, Xk, ck), np.nan)
        return out

    res = map_blocks(block, model, sim)
    n = res["opt"].size
    est, se = float(res["opt"].mean()), float(res["opt"].std(ddof=1) / np.sqrt(n))
    gap = abs(est - x0)
    thr = _tol(3.0 * se, x0)
    ok = gap <= thr
    details = {"optimal_estimate": est}
    for k, (pi_k, kappa, g) in enumerate(others):
        v = res[f"random_{k}"]
        adm = np.isfinite(v)
        m, s = float(v[adm].mean()), float(v[adm].std(ddof=1) / np.sqrt(adm.sum()))
        passed = bool(m <= x0 + _tol(3.0 * s, x0))
        details[f"random_{k}"] = {"pi": pi_k, "consumption_rate": kappa, "gamma": g,
                                  "estimate": m, "se": s, "admissible_fraction": float(adm.mean()),
                                  "pass": passed}
        ok &= passed
    return CheckReport("budget_identity", gap, thr, bool(ok), n, sim.seed, se, details)


# --------------------------------------------------------------------------
# primal BSDE residual


def _third_derivative_bound(y, h):
    if y.size < 4:
        return 0.0
    return float(np.max(np.abs(np.diff(y, 3)))) / h**3


def _residual(psi, t, drift, breaks):
    h = t[1] - t[0]
    d = (psi[2:] - psi[:-2]) / (2.0 * h)
    res = np.abs(d - drift[1:-1])
    keep = np.ones(res.size, dtype=bool)
    for b in breaks:
        keep &= ~((t[:-2] <= b) & (t[2:] >= b))
    res = res[keep]
    trunc = h**2 / 6.0 * _third_derivative_bound(psi, h)
    roundoff = 4.0 * np.finfo(float).eps * float(np.max(np.abs(psi))) / h
    return (float(res.max()) if res.size else 0.0), trunc + roundoff


def primal_drift(model: MarketModel, t, psi, regime="pre", u=0.0):
    """Deterministic primal generator ``-(1-p) Psi^q - p r Psi + p/(2(p-1)) theta^2 Psi``."""
    p, q = model.p, model.q
    r = model.rate(t, regime, u)
    theta = model.theta(t, regime, u)
    return -(1.0 - p) * psi**q - p * r * psi + 0.5 * p / (p - 1.0) * theta**2 * psi


def primal_residuals(model: MarketModel, dual: DualSolution, primal: PrimalSolution,
                     u_points=(0.0, 0.5)) -> dict:
    """Max centred-difference residual of the primal ODEs and truncation estimates.

    The before-switch drift carries the compensator ``-lam * psi_tilde`` of the
    jump term; without it the printed-form residual is reported separately.
    """
    t = primal.grid_t
    breaks = model.breakpoints()
    drift0 = primal_drift(model, t, primal.psi0) - model.lam(t) * primal.psi_tilde
    res0, trunc0 = _residual(primal.psi0, t, drift0, breaks)
    printed0, _ = _residual(primal.psi0, t, primal_drift(model, t, primal.psi0), breaks)
    out = {"pre": (res0, trunc0), "pre_without_compensator": printed0}
    n = t.size - 1
    for frac in u_points:
        j = int(round(frac * n))
        if n - j < 4:
            continue
        tt, psi = t[j:], primal.psi1[j, j:]
        drift1 = primal_drift(model, tt, psi, "post", t[j])
        out[f"post_u={t[j]:.6g}"] = _residual(psi, tt, drift1, breaks)
    return out


def check_primal_bsde_residual(model: MarketModel, dual: DualSolution,
                               primal: PrimalSolution | None = None) -> CheckReport:
    primal = primal_from_dual(dual) if primal is None else primal
    res = primal_residuals(model, dual, primal)
    details = {"pre_without_compensator": res.pop("pre_without_compensator")}
    for k, (r, trunc) in res.items():
        details[k] = {"residual": r, "threshold": 10.0 * trunc, "pass": bool(r <= 10.0 * trunc)}
    worst = max(res, key=lambda k: res[k][0] / res[k][1])
    stat, thr = res[worst][0], 10.0 * res[worst][1]
    ok = all(d["pass"] for k, d in details.items() if isinstance(d, dict))
    terminal = bool(primal.psi0[-1] == 1.0 and np.all(primal.psi1[:, -1] == 1.0))
    details["terminal_exact"] = terminal
    return CheckReport("primal_bsde_residual", stat, thr, bool(ok and terminal), details=details)


# --------------------------------------------------------------------------
# dynamic programming infimum


def check_dpp_infimum(model: MarketModel, dual: DualSolution, sim: SimConfig,
                      gamma_grid=(-0.5, 0.0, 0.5, 1.0, 2.0)) -> CheckReport:
    """The dual objective over a finite control family is minimised by ``gamma*``.

    The family holds the constants in ``gamma_grid``, the constant frozen at
    ``gamma*_0`` and the exact ``gamma*`` evaluator; all use common random numbers.
    """
    _require_grid(dual, sim)
    g0 = float(dual.gamma_star_pre[0])
    family = {f"const_{g:+.6g}": np.full(dual.grid_t.size, float(g)) for g in gamma_grid}
    family[f"const_gamma0_{g0:+.6g}"] = np.full(dual.grid_t.size, g0)
    family["gamma_star"] = dual.gamma_star_pre
    for name, g in family.items():
        if np.any(g <= -1.0):
            raise ModelError(f"control {name!r} is inadmissible")
    controls = {k: _grid_control(v) for k, v in family.items()}

    def block(paths):
        return {k: dual_objective_sample(paths, density_path(c, paths, model), model.q)
                for k, c in controls.items()}

    res = map_blocks(block, model, sim)
    phi0 = float(dual.phi0[0])
    est = {k: float(v.mean()) for k, v in res.items()}
    se = {k: float(v.std(ddof=1) / np.sqrt(v.size)) for k, v in res.items()}
    star, star_se = est["gamma_star"], se["gamma_star"]
    min_other = min(v for k, v in est.items() if k != "gamma_star")
    argmin = min(est, key=est.get)
    min_ok = star <= min_other + _tol(star_se, phi0)
    floor_ok = all(est[k] >= phi0 - _tol(se[k], phi0) for k in est)
    return CheckReport("dpp_infimum", star - min_other, _tol(star_se, phi0),
                       bool(min_ok and floor_ok), sim.n_paths, sim.seed, star_se,
                       {"estimates": est, "se": se, "phi0": phi0, "argmin": argmin,
                        "gamma_star_0": g0, "all_above_phi0": bool(floor_ok)})


# --------------------------------------------------------------------------
# bounds and consistency


def check_bounds_and_consistency(model: MarketModel, dual: DualSolution) -> CheckReport:
    phi1 = dual.after.values
    phi1_min = float(np.nanmin(phi1))
    phi0_min = float(np.min(dual.phi0))
    jump_min = float(np.min(dual.phi1_diag))
    A, C = gamma_bounds(dual, model)
    g = dual.gamma_star_pre
    details = {
        "phi1_min": phi1_min, "phi1_lower_ok": phi1_min >= 1.0 - 1e-12,
        "phi1_max": float(np.nanmax(phi1)), "phi1_bound": dual.after.bound,
        "phi1_upper_ok": float(np.nanmax(phi1)) <= dual.after.bound,
        "phi0_min": phi0_min, "m_floor": model.m_floor, "phi0_floor_ok": phi0_min >= model.m_floor,
        "phi_minus_plus_tilde_min": jump_min, "jump_lower_ok": jump_min >= 1.0 - 1e-12,
        "gamma_bounds": [A, C], "gamma_bounds_ok": bool(A > -1.0 and np.all((g >= A) & (g <= C))),
        "terminal_ok": bool(dual.phi0[-1] == 1.0 and np.all(phi1[:, -1] == 1.0)),
    }
    stat = min(phi1_min - 1.0, phi0_min - model.m_floor, jump_min - 1.0)
    if model.same_regimes():
        dev = float(np.max(np.abs(dual.phi0 - dual.phi1_diag)))
        details.update({"same_regimes": True, "max_phi0_minus_diag": dev,
                        "consistency_ok": dev <= 1e-8,
                        "gamma_star_max_abs": float(np.max(np.abs(g))),
                        "gamma_zero_ok": float(np.max(np.abs(g))) <= 1e-8})
    ok = all(v for k, v in details.items() if k.endswith("_ok"))
    return CheckReport("bounds_and_consistency", stat, 0.0, bool(ok), details=_finite(details))


# --------------------------------------------------------------------------
# switch-time law and scheme cross-validation


def ks_censored(tau, model: MarketModel) -> float:
    """Sup distance between the empirical and exact law of ``tau`` on ``[0, T]``."""
    tau = np.sort(np.asarray(tau, dtype=float))
    n = tau.size
    fin = tau[np.isfinite(tau) & (tau <= model.T)]
    F = 1.0 - np.exp(-cumulative_intensity(model, fin))
    k = np.arange(1, fin.size + 1)
    d_plus = np.max(k / n - F) if fin.size else 0.0
    d_minus = np.max(F - (k - 1) / n) if fin.size else 0.0
    at_T = abs(fin.size / n - (1.0 - math.exp(-float(cumulative_intensity(model, model.T)))))
    return float(max(d_plus, d_minus, at_T))


def check_switch_time_law(model: MarketModel, n_draws: int = 100_000, seed: int = 42,
                          alpha: float = 0.01) -> CheckReport:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    tau = simulate_default_time(model, rng.standard_exponential(n_draws))
    D = ks_censored(tau, model)
    crit = float(stats.kstwo.ppf(1.0 - alpha, n_draws))
    return CheckReport("switch_time_law", D, crit, bool(D <= crit), n_draws, seed,
                       details={"survival_at_T": float(np.mean(~(tau <= model.T)))})


def random_deterministic_models(n: int, seed: int) -> list[MarketModel]:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(13,)))
    out = []
    for _ in range(n):
        sigma = rng.uniform(0.15, 0.4)
        out.append(make_model(p=rng.uniform(0.2, 0.8), T=rng.uniform(0.5, 2.0),
                              r0=rng.uniform(0.0, 0.06), r1=rng.uniform(0.0, 0.08),
                              nu=rng.uniform(0.03, 0.12), sigma=sigma, lam=rng.uniform(0.0, 0.5)))
    return out


def check_scheme_cross_validation(model: MarketModel, dual: DualSolution, n_paths: int = 50_000,
                                  n_steps: int = 50, degrees=(0, 1, 2, 3), seed: int = 42,
                                  n_models: int = 10, mc_paths: int = 20_000) -> CheckReport:
    """Regression Monte Carlo against RK4 for ``Phi0_0`` (1%) and the
    after-switch Monte Carlo against quadrature on random models (3 SE)."""
    phi0 = float(dual.phi0[0])
    details, worst = {}, 0.0
    ok = True
    for deg in degrees:
        sol = solve_phi0_lsmc(model, dual.after, n_paths, n_steps, deg, seed)
        rel = abs(sol.values[0] / phi0 - 1.0)
        details[f"lsmc_degree_{deg}"] = {"phi0_0": float(sol.values[0]), "rel_err": rel,
                                         "pass": bool(rel <= 0.01)}
        ok &= rel <= 0.01
        worst = max(worst, rel)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(17,)))
    mc = []
    for k, m in enumerate(random_deterministic_models(n_models, seed)):
        u = float(rng.uniform(0.0, m.T))
        exact = float(solve_phi1_closed(m, u)[1][0])
        est, se = solve_phi1_mc(m, u, mc_paths, 200, seed + k)
        z = abs(est - exact) / se if se > 0 else 0.0
        mc.append({"u": u, "exact": exact, "estimate": est, "se": se, "z": z, "pass": bool(z <= 3.0)})
        ok &= z <= 3.0
    details["phi1_mc"] = mc
    return CheckReport("scheme_cross_validation", worst, 0.01, bool(ok), n_paths, seed,
                       details=details)


# --------------------------------------------------------------------------
# suite


def run_suite(model: MarketModel, sim: SimConfig, lsmc: dict | None = None,
              include_scheme: bool = True) -> list[CheckReport]:
    """All checks on one model; the dual solve uses the simulation grid."""
    dual = solve_dual(model, sim.n_steps)
    strategy = OptimalStrategy.from_dual(model, dual)
    lsmc = {"n_paths": 50_000, "n_steps": 50} | dict(lsmc or {})
    reports = [
        check_bounds_and_consistency(model, dual),
        check_primal_bsde_residual(model, dual),
        check_switch_time_law(model, sim.n_paths, sim.seed),
        check_martingale_family(model, dual, sim),
        check_dpp_infimum(model, dual, sim),
        check_duality_gap(model, dual, strategy, sim),
        check_budget_identity(model, dual, strategy, sim),
    ]
    if include_scheme:
        deg = lsmc.get("basis_degree", 3)
        reports.append(check_scheme_cross_validation(
            model, dual, lsmc["n_paths"], lsmc["n_steps"], tuple(range(deg + 1)), sim.seed))
    return reports


def report_json(reports: list[CheckReport]) -> str:
    payload = {"all_pass": all(r.passed for r in reports),
               "checks": [r.to_json() for r in reports]}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def report_table(reports: list[CheckReport]) -> str:
    lines = [f"{'check':<26} {'statistic':>14} {'threshold':>14} {'n_paths':>9}  result"]
    for r in reports:
        lines.append(f"{r.name:<26} {r.statistic:>14.6g} {r.threshold:>14.6g} {r.n_paths:>9}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
