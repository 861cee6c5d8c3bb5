"""Dual value process: before/after-switch decomposition of the jump BSDE.

With deterministic coefficients the after-switch family ``Phi1_t(u)`` solves a
linear ODE with an explicit integrating-factor solution (evaluated here by
composite Simpson quadrature) and the before-switch ``Phi0`` solves a
nonlinear ODE coupled to the diagonal ``Phi1_t(t)``, integrated backward by
RK4. A regression Monte Carlo scheme is provided as a second, independent
route to ``Phi0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .market import MarketModel, ModelError, derive_q

log = logging.getLogger(__name__)

RIDGE = 1e-8
COND_LIMIT = 1e10
MAX_RETRIES = 4


class NumericalFailure(RuntimeError):
    """A solver produced a state outside the region the theory guarantees."""


# --------------------------------------------------------------------------
# generator and the jump-control minimisation


def generator(p, r, theta, lam, y, z, u):
    """Dual BSDE generator for raw coefficient values (vectorised).

    ``lam`` is the intensity seen by the enlarged filtration, i.e. zero once
    the switch has happened.
    """
    y = np.asarray(y, dtype=float)
    yu = y + np.asarray(u, dtype=float)
    if np.any(y <= 0.0) or np.any(yu <= 0.0):
        raise ModelError("generator needs y > 0 and y + u > 0")
    q = derive_q(p)
    lin = q * r - 0.5 * q * (q - 1.0) * theta**2 + (1.0 - q) * lam
    return lin * y + q * theta * z - (1.0 - q) * lam * yu ** (1.0 - p) * y**p - 1.0


def generator_f(model: MarketModel, t, y, z, u, switch_time: float | None = None):
    """Generator at time ``t``; before the switch unless ``switch_time`` is given."""
    if switch_time is None:
        r, lam = model.r0(t), model.lam(t)
        theta = model.theta(t, "pre")
    else:
        r, lam = model.r1(t, switch_time), 0.0
        theta = model.theta(t, "post", switch_time)
    return generator(model.p, r, theta, lam, y, z, u)


def a_func(x, phi_minus, phi_tilde, p):
    """Jump-control cost ``(Phi- + phi~)(1+x)^q - q Phi- x`` on ``x > -1``."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= -1.0):
        raise ModelError("dual control must exceed -1")
    q = derive_q(p)
    return (phi_minus + phi_tilde) * (1.0 + x) ** q - q * phi_minus * x


def optimal_gamma(phi_minus, phi_tilde, p):
    """Minimiser of :func:`a_func`: ``(Phi-/(Phi- + phi~))^(p-1) - 1``."""
    phi_minus = np.asarray(phi_minus, dtype=float)
    total = phi_minus + np.asarray(phi_tilde, dtype=float)
    if np.any(phi_minus <= 0.0) or np.any(total <= 0.0):
        raise ModelError("optimal_gamma needs Phi- > 0 and Phi- + phi~ > 0")
    derive_q(p)
    return (phi_minus / total) ** (p - 1.0) - 1.0


def a_min_closed(phi_minus, phi_tilde, p):
    """Minimum value of :func:`a_func`, ``(1-q) Phi^p (Phi+phi~)^(1-p) + q Phi``."""
    q = derive_q(p)
    return ((1.0 - q) * phi_minus**p * (phi_minus + phi_tilde) ** (1.0 - p)
            + q * phi_minus)


# --------------------------------------------------------------------------
# after the switch


def _left(t):
    # left limit for right-continuous piecewise coefficients
    return np.nextafter(t, -np.inf)


def _merge_breaks(nodes: NDArray[np.float64], breaks) -> tuple[NDArray[np.float64], NDArray[np.intp]]:
    """Insert coefficient breakpoints that fall strictly inside a cell.

    Returns the merged nodes and the positions of the original nodes in it, so
    the integrators never step across a discontinuity.
    """
    tol = 1e-12 * max(1.0, abs(nodes[-1]))
    breaks = np.asarray(breaks, dtype=float)
    inside = breaks[(breaks > nodes[0] + tol) & (breaks < nodes[-1] - tol)]
    if inside.size:
        gap = np.min(np.abs(inside[:, None] - nodes[None, :]), axis=1)
        inside = inside[gap > tol]
    if inside.size == 0:
        return nodes, np.arange(nodes.size)
    merged = np.union1d(nodes, inside)
    return merged, np.searchsorted(merged, nodes)


def _k_after(model: MarketModel, t, u):
    q = model.q
    theta = model.theta(t, "post", u)
    return q * model.r1(t, u) - 0.5 * q * (q - 1.0) * theta**2


def _phi1_on_nodes(model: MarketModel, u: float, nodes: NDArray[np.float64]) -> NDArray[np.float64]:
    """``Phi1_t(u)`` at ascending ``nodes`` (last node must be ``T``).

    The solution ``exp(-int_t^T k) + int_t^T exp(-int_t^s k) ds`` is built from
    a cumulative Simpson integral of ``k`` (midpoint and quarter points) and a
    second Simpson pass for the outer integral, so it is fourth order on any
    node spacing.
    """
    nodes, keep = _merge_breaks(nodes, model.breakpoints())
    a, b = nodes[:-1], nodes[1:]
    h = b - a
    mid = a + 0.5 * h
    k_a = _k_after(model, a, u)
    k_b = _k_after(model, _left(b), u)
    k_m = _k_after(model, mid, u)
    k_q = _k_after(model, a + 0.25 * h, u)

    K = np.concatenate([[0.0], np.cumsum(h / 6.0 * (k_a + 4.0 * k_m + k_b))])
    K_mid = K[:-1] + h / 12.0 * (k_a + 4.0 * k_q + k_m)
    K_T = K[-1]
    # exponents are taken relative to K_T to keep the factors O(1)
    e_node = np.exp(-(K - K_T))
    e_mid = np.exp(-(K_mid - K_T))
    seg = h / 6.0 * (e_node[:-1] + 4.0 * e_mid + e_node[1:])
    tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    return (np.exp(K - K_T) + np.exp(K - K_T) * tail)[keep]


def solve_phi1_closed(model: MarketModel, u: float, t=None, n_steps: int = 1000):
    """After-switch solution for a fixed switch time ``u``.

    Returns ``(t, Phi1_t(u))`` on ``t`` (default: ``n_steps`` uniform steps on
    ``[u, T]``).
    """
    if not (0.0 <= u <= model.T):
        raise ModelError(f"switch time {u!r} outside [0, T]")
    if t is None:
        t = np.linspace(u, model.T, n_steps + 1)
    t = np.asarray(t, dtype=float)
    if np.any(t < u) or np.any(np.diff(t) <= 0.0):
        raise ModelError("evaluation times must be increasing and >= u")
    if t[-1] == model.T:
        nodes = t
        return t, _phi1_on_nodes(model, u, nodes)
    nodes = np.append(t, model.T)
    return t, _phi1_on_nodes(model, u, nodes)[:-1]


def phi1_bound(model: MarketModel) -> float:
    """Upper bound ``exp(sup|k| T) (1 + T)`` for the after-switch family."""
    q, T = model.q, model.T
    r_hi = model.r1.bound(T)
    nu_hi = model.nu.bound(T)
    s_lo = model.sigma.value_range(T)[0]
    theta_hi = (nu_hi + r_hi) / s_lo
    k_hi = abs(q) * r_hi + 0.5 * q * (q - 1.0) * theta_hi**2
    return float(np.exp(k_hi * T) * (1.0 + T))


@dataclass(frozen=True)
class AfterSwitchSolution:
    """``Phi1_t(u)`` on a uniform grid.

    ``values[j, i]`` holds ``Phi1_{t_i}(t_j)`` for ``i >= j`` and NaN below
    the diagonal. ``diag_mid`` is the diagonal at the cell midpoints, needed
    by the RK4 stages of the before-switch equation.
    """

    grid_t: NDArray[np.float64]
    values: NDArray[np.float64]
    diag: NDArray[np.float64]
    diag_mid: NDArray[np.float64]
    zeta1: NDArray[np.float64]
    bound: float

    @property
    def n_steps(self) -> int:
        return self.grid_t.size - 1

    def diagonal(self, t):
        """Diagonal ``Phi1_t(t)``; exact at grid nodes, linear in between."""
        return np.interp(t, self.grid_t, self.diag)


def _diagonal(model: MarketModel, grid: NDArray[np.float64]) -> NDArray[np.float64]:
    if not model.r1.depends_on_u:
        return _phi1_on_nodes(model, 0.0, grid)
    out = np.empty(grid.size)
    for j, s in enumerate(grid):
        out[j] = _phi1_on_nodes(model, s, grid[j:])[0] if j < grid.size - 1 else 1.0
    return out


def solve_after_switch(model: MarketModel, n_steps: int = 1000) -> AfterSwitchSolution:
    if n_steps < 2:
        raise ModelError("n_steps must be at least 2")
    grid = np.linspace(0.0, model.T, n_steps + 1)
    fine = np.linspace(0.0, model.T, 2 * n_steps + 1)
    n = grid.size
    values = np.full((n, n), np.nan)
    if not model.r1.depends_on_u:
        prof_fine = _phi1_on_nodes(model, 0.0, fine)
        prof = prof_fine[::2]
        for j in range(n):
            values[j, j:] = prof[j:]
        diag, diag_mid = prof, prof_fine[1::2]
    else:
        for j in range(n):
            values[j, j:] = _phi1_on_nodes(model, grid[j], grid[j:]) if j < n - 1 else 1.0
        diag = np.diagonal(values).copy()
        diag_mid = _diagonal(model, fine)[1::2]
    zeta1 = np.where(np.isnan(values), np.nan, 0.0)
    return AfterSwitchSolution(grid, values, diag, diag_mid, zeta1, phi1_bound(model))


def solve_phi1_mc(model: MarketModel, u: float, n_paths: int = 10_000, n_steps: int = 200,
                  seed: int = 0) -> tuple[float, float]:
    """Monte Carlo estimate of ``Phi1_u(u)`` from its adjoint-process representation.

    Each path carries the stochastic exponential ``E(-int q theta1 dB)`` times
    the deterministic discount exponent; the estimate averages the terminal
    weight plus its time integral (trapezoid). Returns ``(estimate, SE)``.
    """
    if n_paths < 100:
        raise ModelError("n_paths < 100 is statistically meaningless")
    if not (0.0 <= u <= model.T):
        raise ModelError(f"switch time {u!r} outside [0, T]")
    if u == model.T:
        return 1.0, 0.0
    q = model.q
    t = np.linspace(u, model.T, n_steps + 1)
    dt = t[1] - t[0]
    theta = model.theta(t[:-1], "post", u)
    k = _k_after(model, t[:-1], u)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dB = rng.standard_normal((n_paths, n_steps)) * np.sqrt(dt)
    # left-point sums so the discrete stochastic exponential has mean one
    log_w = np.cumsum(-q * theta * dB - 0.5 * (q * theta) ** 2 * dt - k * dt, axis=1)
    w = np.exp(np.concatenate([np.zeros((n_paths, 1)), log_w], axis=1))
    integral = dt * (0.5 * w[:, 0] + w[:, 1:-1].sum(axis=1) + 0.5 * w[:, -1])
    sample = w[:, -1] + integral
    se = sample.std(ddof=1) / np.sqrt(n_paths)
    return float(sample.mean()), float(se)


# --------------------------------------------------------------------------
# before the switch


@dataclass(frozen=True)
class BeforeSwitchSolution:
    grid_t: NDArray[np.float64]
    values: NDArray[np.float64]
    zeta0: NDArray[np.float64]
    m_floor: float
    diagnostics: dict = field(default_factory=dict, compare=False)


def _pre_coeffs(model: MarketModel, t):
    q = model.q
    theta = model.theta(t, "pre")
    lam = model.lam(t)
    lin = q * model.r0(t) - 0.5 * q * (q - 1.0) * theta**2 + (1.0 - q) * lam
    return lin, (1.0 - q) * lam


def _rk4_phi0(model, grid, diag, diag_mid, clamp):
    p, m = model.p, model.m_floor
    n = grid.size - 1
    y = np.empty(n + 1)
    y[-1] = 1.0

    def rhs(lin, jump, d, v):
        v_p = max(v, m) if clamp else v
        if v_p <= 0.0:
            raise NumericalFailure("before-switch value left the positive half-line")
        return lin * v - jump * d ** (1.0 - p) * v_p**p - 1.0

    lin_a, jump_a = _pre_coeffs(model, grid[:-1])
    lin_b, jump_b = _pre_coeffs(model, _left(grid[1:]))
    mid = 0.5 * (grid[:-1] + grid[1:])
    lin_m, jump_m = _pre_coeffs(model, mid)
    for i in range(n - 1, -1, -1):
        h = grid[i + 1] - grid[i]
        v = y[i + 1]
        k1 = rhs(lin_b[i], jump_b[i], diag[i + 1], v)
        k2 = rhs(lin_m[i], jump_m[i], diag_mid[i], v - 0.5 * h * k1)
        k3 = rhs(lin_m[i], jump_m[i], diag_mid[i], v - 0.5 * h * k2)
        k4 = rhs(lin_a[i], jump_a[i], diag[i], v - h * k3)
        y[i] = v - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not clamp and y[i] < m:
            return y, i
    return y, None


def solve_phi0_ode(model: MarketModel, after: AfterSwitchSolution, n_steps: int | None = None,
                   clamp: bool = False) -> BeforeSwitchSolution:
    """Backward RK4 for the before-switch ODE on the grid of ``after``.

    The floor ``m = exp(-(1-q) Lambda T)`` is asserted, not enforced: a step
    that drops below it triggers a retry at half the step size, and after
    ``MAX_RETRIES`` failures :class:`NumericalFailure` is raised. ``clamp=True``
    solves the modified equation with ``max(y, m)^p`` instead.
    """
    if n_steps is not None and n_steps != after.n_steps:
        raise ModelError(f"grid mismatch: n_steps={n_steps} but after-switch grid has "
                         f"{after.n_steps} steps")
    grid = after.grid_t
    diag, diag_mid = after.diag, after.diag_mid
    for attempt in range(MAX_RETRIES + 1):
        refine = 2**attempt
        g, keep = _merge_breaks(np.linspace(0.0, model.T, refine * after.n_steps + 1),
                                model.breakpoints())
        if refine == 1 and g.size == grid.size:
            d, dm = diag, diag_mid
        else:
            mids = 0.5 * (g[:-1] + g[1:])
            fine = _diagonal(model, np.sort(np.concatenate([g, mids])))
            d, dm = fine[::2], fine[1::2]
        y, bad = _rk4_phi0(model, g, d, dm, clamp)
        if bad is None:
            values = y[keep][::refine]
            return BeforeSwitchSolution(grid.copy(), values, np.zeros_like(values),
                                        model.m_floor, {"method": "rk4", "refine": refine,
                                                        "clamp": clamp})
        log.warning("Phi0 fell below floor %.6g at t=%.6g; halving step", model.m_floor, g[bad])
    raise NumericalFailure(f"Phi0 fell below the floor {model.m_floor:.6g} after "
                           f"{MAX_RETRIES} step halvings")


def _basis(x, degree):
    return np.vander(x, degree + 1, increasing=True)


def _regress(X, y, degree):
    """Ridge least squares on monomials; lowers the degree if ill-conditioned."""
    while True:
        A = _basis(X, degree)
        G = A.T @ A / A.shape[0]
        cond = float(np.linalg.cond(G))
        if cond <= COND_LIMIT or degree == 0:
            break
        degree -= 1
    coef = np.linalg.solve(G + RIDGE * np.eye(degree + 1), A.T @ y / A.shape[0])
    return A @ coef, degree, cond


def solve_phi0_lsmc(model: MarketModel, after: AfterSwitchSolution, n_paths: int = 50_000,
                    n_steps: int = 50, basis_degree: int = 3, seed: int = 0,
                    coefficients=None) -> BeforeSwitchSolution:
    """Regression Monte Carlo for the before-switch BSDE.

    Explicit backward scheme on a uniform grid: the control is the projection
    of ``Y_{i+1} dB_i / dt`` and the value the projection of
    ``Y_{i+1} - f(t_i, Y_{i+1}, Z_i, Phi1_diag - Y_{i+1}) dt``, both onto
    monomials of the standardised Brownian state.

    ``coefficients``, if given, is a callable ``(t, B) -> (r0, theta0, lam)``
    returning per-path arrays; this is the hook for state-dependent
    coefficients. By default the deterministic model coefficients are used.
    """
    if n_paths < 100:
        raise ModelError("n_paths < 100 is statistically meaningless")
    if basis_degree < 0:
        raise ModelError("basis_degree must be non-negative")
    p = model.p
    t = np.linspace(0.0, model.T, n_steps + 1)
    dt = t[1] - t[0]
    diag = after.diagonal(t)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dB = rng.standard_normal((n_paths, n_steps)) * np.sqrt(dt)
    B = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dB, axis=1)], axis=1)

    Y = np.ones(n_paths)
    values = np.empty(n_steps + 1)
    zeta = np.zeros(n_steps + 1)
    values[-1] = 1.0
    conds, degrees = [], []
    for i in range(n_steps - 1, -1, -1):
        if coefficients is None:
            r = model.r0(t[i])
            theta = model.theta(t[i], "pre")
            lam = model.lam(t[i])
        else:
            r, theta, lam = coefficients(t[i], B[:, i])
        target_z = Y * dB[:, i] / dt
        if i == 0:
            Z = np.full(n_paths, target_z.mean())
        else:
            x = B[:, i] / np.sqrt(t[i])
            Z, _, _ = _regress(x, target_z, basis_degree)
        u = diag[i] - Y
        target_y = Y - generator(p, r, theta, lam, Y, Z, u) * dt
        if i == 0:
            Y = np.full(n_paths, target_y.mean())
            cond, deg = 1.0, 0
        else:
            Y, deg, cond = _regress(x, target_y, basis_degree)
            if deg < basis_degree:
                log.info("LSMC regression at t=%.4g reduced to degree %d (cond %.3g)", t[i], deg, cond)
        values[i] = Y.mean()
        zeta[i] = Z.mean()
        conds.append(cond)
        degrees.append(deg)
    return BeforeSwitchSolution(t, values, zeta, model.m_floor,
                                {"method": "lsmc", "condition_numbers": conds[::-1],
                                 "degrees": degrees[::-1], "n_paths": n_paths})


# --------------------------------------------------------------------------
# assembled solution


@dataclass(frozen=True)
class DualSolution:
    """The jump-BSDE solution glued from its before/after-switch parts.

    Path evaluators take a grid index ``i`` and the per-path index ``j`` of
    the first grid point at or after the switch (``j > n`` means no switch
    on ``[0, T]``). They broadcast over arrays of ``j``.
    """

    before: BeforeSwitchSolution
    after: AfterSwitchSolution
    p: float

    @property
    def grid_t(self):
        return self.before.grid_t

    @property
    def n_steps(self) -> int:
        return self.grid_t.size - 1

    @property
    def phi0(self):
        return self.before.values

    @property
    def phi1_diag(self):
        return self.after.diag

    @property
    def phi_tilde_pre(self):
        return self.after.diag - self.before.values

    @property
    def gamma_star_pre(self):
        return optimal_gamma(self.before.values, self.phi_tilde_pre, self.p)

    def _after_value(self, i, j):
        j = np.asarray(j)
        jj = np.minimum(j, i)
        return self.after.values[jj, i]

    def phi(self, i, j):
        j = np.asarray(j)
        return np.where(i < j, self.before.values[i], self._after_value(i, j))

    def phi_minus(self, i, j):
        j = np.asarray(j)
        return np.where(i <= j, self.before.values[i], self._after_value(i, j))

    def phi_tilde(self, i, j):
        j = np.asarray(j)
        return np.where(i <= j, self.phi_tilde_pre[i], 0.0)

    def zeta(self, i, j):
        j = np.asarray(j)
        jj = np.minimum(j, i)
        return np.where(i <= j, self.before.zeta0[i], self.after.zeta1[jj, i])

    def gamma_star(self, i, j):
        j = np.asarray(j)
        return np.where(i <= j, self.gamma_star_pre[i], 0.0)

    def rows(self):
        """Columns t, phi0, phi1_diag, phi_tilde, gamma_star, zeta0."""
        return np.column_stack([self.grid_t, self.phi0, self.phi1_diag, self.phi_tilde_pre,
                                self.gamma_star_pre, self.before.zeta0])

    CSV_HEADER = ("t", "phi0", "phi1_diag", "phi_tilde", "gamma_star", "zeta0")


def assemble_dual(before: BeforeSwitchSolution, after: AfterSwitchSolution, p: float) -> DualSolution:
    if before.grid_t.shape != after.grid_t.shape or not np.allclose(before.grid_t, after.grid_t,
                                                                      rtol=0.0, atol=1e-12):
        raise ModelError("grid mismatch between before- and after-switch solutions")
    if np.any(before.values <= 0.0):
        raise NumericalFailure("before-switch solution is not positive")
    if np.any(after.diag <= 0.0):
        raise NumericalFailure("Phi- + phi~ must stay positive")
    return DualSolution(before, after, p)


def solve_dual(model: MarketModel, n_steps: int = 1000) -> DualSolution:
    """Deterministic-coefficient solve: Simpson for Phi1, RK4 for Phi0."""
    after = solve_after_switch(model, n_steps)
    before = solve_phi0_ode(model, after)
    return assemble_dual(before, after, model.p)
