"""Optimal consumption/investment and the primal value from the dual solution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .dual import DualSolution
from .market import MarketModel, ModelError, derive_q
from .simulate import PathBundle, PathState


def _check_positive(**kw):
    for name, v in kw.items():
        if np.any(~(np.asarray(v, dtype=float) > 0.0)):
            raise ModelError(f"{name} must be positive")


def eta_star(x0: float, phi0_at_0: float, p: float) -> float:
    """Lagrange multiplier ``(x0 / Phi_0)^(p-1)``."""
    _check_positive(x0=x0, phi0_at_0=phi0_at_0)
    derive_q(p)
    return float((x0 / phi0_at_0) ** (p - 1.0))


def optimal_controls(R, L, phi_minus, phi_hat, theta, sigma, eta, p, C: float | None = None):
    """``(pi*, c*)`` from the path state and the dual solution.

    ``c* = (eta R L)^(1/(p-1))`` and
    ``pi* = (phi_hat / Phi- + theta / (1 - p)) / sigma``.
    """
    _check_positive(R=R, L=L, phi_minus=phi_minus, eta=eta)
    sigma = np.asarray(sigma, dtype=float)
    if C is not None and (np.any(sigma < 1.0 / C) or np.any(sigma > C)):
        raise ModelError(f"volatility outside [1/C, C] with C={C}")
    c = (eta * np.asarray(R) * np.asarray(L)) ** (1.0 / (p - 1.0))
    pi = (np.asarray(phi_hat) / phi_minus + np.asarray(theta) / (1.0 - p)) / sigma
    return pi, c


def optimal_wealth(R, L, Phi, eta, p):
    """Closed-form optimal wealth ``(eta R L)^(1/(p-1)) Phi``."""
    _check_positive(R=R, L=L, Phi=Phi, eta=eta)
    return (eta * np.asarray(R) * np.asarray(L)) ** (1.0 / (p - 1.0)) * Phi


def primal_value(x0: float, phi0_at_0: float, p: float) -> float:
    """``V(x0) = (x0^p / p) Phi_0^(1-p)``."""
    _check_positive(x0=x0, phi0_at_0=phi0_at_0)
    derive_q(p)
    return float(x0**p / p * phi0_at_0 ** (1.0 - p))


def gamma_bounds(dual: DualSolution, model: MarketModel) -> tuple[float, float]:
    """Constants ``-1 < A <= gamma* <= C`` implied by the bounds on Phi."""
    p = model.p
    phi_hi = float(np.max(dual.phi0))
    ratio_lo = model.m_floor / dual.after.bound
    return phi_hi ** (p - 1.0) - 1.0, ratio_lo ** (p - 1.0) - 1.0


@dataclass(frozen=True)
class OptimalStrategy:
    """Optimal controls as evaluators over simulated path states.

    The dual solution and the simulation must share the time grid; the
    evaluators index the dual solution by grid position.
    """

    model: MarketModel
    dual: DualSolution
    eta_star: float

    @classmethod
    def from_dual(cls, model: MarketModel, dual: DualSolution, x0: float | None = None):
        x0 = model.x0 if x0 is None else x0
        return cls(model, dual, eta_star(x0, float(dual.phi0[0]), model.p))

    @property
    def x0(self) -> float:
        return float(self.eta_star ** (1.0 / (self.model.p - 1.0)) * self.dual.phi0[0])

    def gamma(self, state: PathState):
        """Pre-switch ``gamma*``; the simulator zeroes it after the switch."""
        return self.dual.gamma_star_pre[state.i]

    def gamma_path(self, i, j):
        return self.dual.gamma_star(i, j)

    def pi(self, state: PathState):
        i, j = state.i, state.switch_idx
        return ((self.dual.zeta(i, j) / self.dual.phi_minus(i, j)
                 + state.theta / (1.0 - self.model.p)) / state.sigma)

    def c(self, state: PathState):
        return (self.eta_star * state.R * state.L) ** (1.0 / (self.model.p - 1.0))

    def wealth(self, paths: PathBundle) -> NDArray[np.float64]:
        """Closed-form optimal wealth along simulated paths (needs ``paths.L``)."""
        phi = np.stack([self.dual.phi(i, paths.switch_idx) for i in range(paths.n_steps + 1)],
                       axis=1)
        return optimal_wealth(paths.R, paths.L, phi, self.eta_star, self.model.p)

    CSV_HEADER = ("t", "gamma_star", "pi_star_pre", "pi_star_post_diag", "c_star_unit")

    def rows(self) -> NDArray[np.float64]:
        """Strategy table on the dual grid.

        ``c_star_unit`` is the consumption rate for unit initial wealth along
        the scenario with no switch and a flat Brownian path (``B = 0``).
        """
        m, d, p = self.model, self.dual, self.model.p
        t = d.grid_t
        dt = t[1] - t[0]
        gamma = d.gamma_star_pre
        theta0 = m.theta(t, "pre")
        sigma = m.sigma(t)
        pi_pre = (d.before.zeta0 / d.phi0 + theta0 / (1.0 - p)) / sigma
        theta1 = m.theta(t, "post", t)
        pi_post = (np.diagonal(d.after.zeta1) / d.phi1_diag + theta1 / (1.0 - p)) / sigma
        r0 = m.r0(t)
        lam = m.lam(t)
        log_R = np.concatenate([[0.0], np.cumsum(0.5 * (r0[:-1] + r0[1:]) * dt)])
        log_L = np.concatenate([[0.0], np.cumsum((-0.5 * theta0[:-1] ** 2
                                                   - gamma[:-1] * lam[:-1]) * dt)])
        eta_unit = eta_star(1.0, float(d.phi0[0]), p)
        c_unit = (eta_unit * np.exp(-log_R + log_L)) ** (1.0 / (p - 1.0))
        return np.column_stack([t, gamma, pi_pre, pi_post, c_unit])


# --------------------------------------------------------------------------
# primal BSDE


@dataclass(frozen=True)
class PrimalSolution:
    """``(Psi, psi_hat, psi_tilde)`` with ``Psi = Phi^(1-p)`` on the dual grid."""

    grid_t: NDArray[np.float64]
    psi0: NDArray[np.float64]
    psi1: NDArray[np.float64]
    psi_hat0: NDArray[np.float64]
    psi_hat1: NDArray[np.float64]
    psi_tilde: NDArray[np.float64]
    p: float

    @property
    def psi1_diag(self):
        return np.diagonal(self.psi1).copy()

    def value(self, x, i: int = 0, j: int | None = None):
        """``V(t_i, x) = x^p Psi_{t_i} / p``; ``j`` selects the post-switch branch."""
        _check_positive(x=x)
        psi = self.psi0[i] if j is None or i < j else self.psi1[j, i]
        return np.asarray(x, dtype=float) ** self.p * psi / self.p


def primal_from_dual(dual: DualSolution, p: float | None = None) -> PrimalSolution:
    p = dual.p if p is None else p
    phi0, phi1 = dual.phi0, dual.after.values
    psi0 = phi0 ** (1.0 - p)
    psi1 = phi1 ** (1.0 - p)
    psi_hat0 = (1.0 - p) * dual.before.zeta0 * phi0 ** (-p)
    psi_hat1 = (1.0 - p) * dual.after.zeta1 * phi1 ** (-p)
    psi_tilde = dual.phi1_diag ** (1.0 - p) - psi0
    return PrimalSolution(dual.grid_t, psi0, psi1, psi_hat0, psi_hat1, psi_tilde, p)


def primal_triplet(phi, phi_hat, phi_tilde, p):
    """Forward map ``(Phi, phi_hat, phi~) -> (Psi, psi_hat, psi~)``."""
    phi = np.asarray(phi, dtype=float)
    return (phi ** (1.0 - p), (1.0 - p) * np.asarray(phi_hat) * phi ** (-p),
            (phi + np.asarray(phi_tilde)) ** (1.0 - p) - phi ** (1.0 - p))


def dual_from_primal(y, z, u, p):
    """Inverse map ``Y = y^(1-q)``, ``Z = (1-q) y^(-q) z``, ``U = (y+u)^(1-q) - y^(1-q)``."""
    q = derive_q(p)
    y = np.asarray(y, dtype=float)
    return (y ** (1.0 - q), (1.0 - q) * y ** (-q) * np.asarray(z),
            (y + np.asarray(u)) ** (1.0 - q) - y ** (1.0 - q))
