"""Market coefficients, power utility and the admissibility checks on them.

The interest rate switches from ``r0`` to ``r1(., u)`` at a random time ``u``
driven by the intensity ``lam``. Coefficients are deterministic functions of
time (and of the switch time for ``r1``), which keeps every dual quantity
deterministic and gives exact ODE oracles for the Monte Carlo code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

Regime = Literal["pre", "post"]

KINDS = ("constant", "piecewise", "affine_u")


class ModelError(ValueError):
    """Raised when a model or one of its inputs is outside its domain."""


# --------------------------------------------------------------------------
# utility


def derive_q(p: float) -> float:
    """Conjugate exponent ``q = p / (p - 1)`` of the power utility.

    ``q`` tends to ``0-`` as ``p -> 0+``; the endpoint itself is rejected.
    """
    if not (0.0 < p < 1.0):
        raise ModelError(f"utility exponent p must lie in (0, 1), got {p!r}")
    return p / (p - 1.0)


@dataclass(frozen=True)
class UtilityParams:
    p: float
    x0: float = 1.0

    def __post_init__(self):
        derive_q(self.p)
        if not self.x0 > 0.0:
            raise ModelError(f"initial wealth x0 must be positive, got {self.x0!r}")

    @property
    def q(self) -> float:
        return derive_q(self.p)


def _positive(x, name):
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0.0)):
        raise ModelError(f"{name} must be positive")
    return arr


@dataclass(frozen=True)
class PowerUtility:
    """``U(x) = x^p/p``, its conjugate ``-y^q/q`` and ``I = (U')^{-1}``."""

    p: float

    def __post_init__(self):
        derive_q(self.p)

    @property
    def q(self) -> float:
        return derive_q(self.p)

    def U(self, x: ArrayLike):
        x = _positive(x, "wealth")
        return x**self.p / self.p

    def dU(self, x: ArrayLike):
        x = _positive(x, "wealth")
        return x ** (self.p - 1.0)

    def conjugate(self, y: ArrayLike):
        y = _positive(y, "dual variable")
        return -(y**self.q) / self.q

    def inverse_marginal(self, y: ArrayLike):
        y = _positive(y, "dual variable")
        return y ** (1.0 / (self.p - 1.0))


def utility_bundle(p: float) -> PowerUtility:
    return PowerUtility(p)


# --------------------------------------------------------------------------
# coefficient functions


@dataclass(frozen=True)
class CoefficientFn:
    """A bounded deterministic coefficient.

    ``constant``
        payload ``{"value": v}``
    ``piecewise``
        payload ``{"breaks": [b1, ..., bk], "values": [v0, ..., vk]}``; the
        value on ``[b_i, b_{i+1})`` is ``v_i`` (right-continuous).
    ``affine_u``
        payload ``{"base": CoefficientFn, "slope": s}``; evaluates to
        ``max(base(t) + s * u, 0)``. Only meaningful for the post-switch rate.
    """

    kind: str
    payload: dict = field(hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown coefficient kind {self.kind!r}; expected one of {KINDS}")
        pl = self.payload
        if self.kind == "constant":
            if not np.isfinite(float(pl["value"])):
                raise ModelError("constant coefficient must be finite")
        elif self.kind == "piecewise":
            breaks = np.asarray(pl["breaks"], dtype=float)
            values = np.asarray(pl["values"], dtype=float)
            if values.shape != (breaks.size + 1,):
                raise ModelError("piecewise coefficient needs len(values) == len(breaks) + 1")
            if np.any(np.diff(breaks) <= 0.0):
                raise ModelError("piecewise breaks must be strictly increasing")
            if not np.all(np.isfinite(values)):
                raise ModelError("piecewise values must be finite")
        else:
            if not isinstance(pl.get("base"), CoefficientFn):
                raise ModelError("affine_u coefficient needs a CoefficientFn 'base'")
            if pl["base"].kind == "affine_u":
                raise ModelError("affine_u base cannot itself depend on u")
            if not np.isfinite(float(pl["slope"])):
                raise ModelError("affine_u slope must be finite")

    @classmethod
    def constant(cls, value: float) -> "CoefficientFn":
        return cls("constant", {"value": float(value)})

    @classmethod
    def piecewise(cls, breaks, values) -> "CoefficientFn":
        return cls("piecewise", {"breaks": [float(b) for b in breaks],
                                 "values": [float(v) for v in values]})

    @classmethod
    def affine_u(cls, base: "CoefficientFn | float", slope: float) -> "CoefficientFn":
        if not isinstance(base, CoefficientFn):
            base = cls.constant(base)
        return cls("affine_u", {"base": base, "slope": float(slope)})

    @property
    def depends_on_u(self) -> bool:
        return self.kind == "affine_u" and self.payload["slope"] != 0.0

    def breakpoints(self) -> NDArray[np.float64]:
        if self.kind == "piecewise":
            return np.asarray(self.payload["breaks"], dtype=float)
        if self.kind == "affine_u":
            return self.payload["base"].breakpoints()
        return np.empty(0)

    def __call__(self, t: ArrayLike, u: ArrayLike = 0.0):
        return self.evaluate(t, u)

    def evaluate(self, t: ArrayLike, u: ArrayLike = 0.0):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full(np.broadcast(t, np.asarray(u)).shape, self.payload["value"])
        if self.kind == "piecewise":
            breaks = np.asarray(self.payload["breaks"], dtype=float)
            values = np.asarray(self.payload["values"], dtype=float)
            out = values[np.searchsorted(breaks, t, side="right")]
            return np.broadcast_to(out, np.broadcast(t, np.asarray(u)).shape).copy()
        base = self.payload["base"].evaluate(t)
        return np.maximum(base + self.payload["slope"] * np.asarray(u, dtype=float), 0.0)

    def value_range(self, T: float) -> tuple[float, float]:
        """Exact (min, max) over ``[0, T] x [0, T]``."""
        if self.kind == "constant":
            v = self.payload["value"]
            return v, v
        if self.kind == "piecewise":
            breaks = np.asarray(self.payload["breaks"], dtype=float)
            values = np.asarray(self.payload["values"], dtype=float)
            lo = np.searchsorted(breaks, 0.0, side="right")
            hi = np.searchsorted(breaks, T, side="right")
            active = values[lo:hi + 1]
            return float(active.min()), float(active.max())
        bmin, bmax = self.payload["base"].value_range(T)
        s = self.payload["slope"]
        ends = [bmin, bmin + s * T, bmax, bmax + s * T]
        return max(min(ends), 0.0), max(max(ends), 0.0)

    def bound(self, T: float) -> float:
        lo, hi = self.value_range(T)
        return max(abs(lo), abs(hi))

    def to_dict(self) -> dict:
        if self.kind == "affine_u":
            return {"kind": "affine_u", "base": self.payload["base"].to_dict(),
                    "slope": self.payload["slope"]}
        return {"kind": self.kind, **self.payload}


# --------------------------------------------------------------------------
# the market


@dataclass(frozen=True)
class MarketModel:
    """Market with one random change of the risk-free rate.

    ``C`` is the declared bound of the (H4)-type conditions (|nu| <= C and
    1/C <= sigma <= C) and ``Lambda`` the declared cap on the intensity. Both
    are stored rather than inferred so the checks and the lower floor of the
    pre-switch dual solution are fixed by the model itself.
    """

    utility: UtilityParams
    T: float
    r0: CoefficientFn
    r1: CoefficientFn
    nu: CoefficientFn
    sigma: CoefficientFn
    lam: CoefficientFn
    Lambda: float
    C: float

    def __post_init__(self):
        if not (self.T > 0.0 and np.isfinite(self.T)):
            raise ModelError(f"horizon T must be positive, got {self.T!r}")
        for name in ("r0", "nu", "sigma", "lam"):
            if getattr(self, name).depends_on_u:
                raise ModelError(f"{name} cannot depend on the switch time")

    @property
    def p(self) -> float:
        return self.utility.p

    @property
    def q(self) -> float:
        return self.utility.q

    @property
    def x0(self) -> float:
        return self.utility.x0

    @property
    def m_floor(self) -> float:
        """Lower bound ``exp(-(1-q) Lambda T)`` of the pre-switch solution."""
        return float(np.exp((self.q - 1.0) * self.Lambda * self.T))

    def breakpoints(self) -> NDArray[np.float64]:
        pts = np.concatenate([c.breakpoints() for c in
                              (self.r0, self.r1, self.nu, self.sigma, self.lam)])
        return np.unique(pts[(pts > 0.0) & (pts < self.T)])

    def rate(self, t, regime: Regime = "pre", u=0.0):
        return self.r0(t) if regime == "pre" else self.r1(t, u)

    def theta(self, t, regime: Regime = "pre", u=0.0):
        return (self.nu(t) - self.rate(t, regime, u)) / self.sigma(t)

    def same_regimes(self, n: int = 200) -> bool:
        """True when the post-switch rate coincides with the pre-switch one."""
        t = np.linspace(0.0, self.T, n + 1)
        tt, uu = np.meshgrid(t, t)
        mask = uu <= tt
        return bool(np.array_equal(self.r1(tt, uu)[mask], self.r0(tt)[mask]))


def risk_premium(model: MarketModel, t: float, regime: Regime = "pre", u: float = 0.0) -> float:
    if not (0.0 <= t <= model.T):
        raise ModelError(f"time {t!r} outside [0, {model.T}]")
    if regime not in ("pre", "post"):
        raise ModelError(f"regime must be 'pre' or 'post', got {regime!r}")
    if regime == "post" and u > t:
        raise ModelError("post-switch premium needs u <= t")
    return float(model.theta(t, regime, u))


# --------------------------------------------------------------------------
# validation report


@dataclass(frozen=True)
class HypothesisCheck:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[HypothesisCheck, ...]

    @property
    def accepted(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[HypothesisCheck]:
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        return "\n".join(f"[{'pass' if c.passed else 'FAIL'}] {c.name}"
                         + (f": {c.detail}" if c.detail else "") for c in self.checks)


def _probe_times(model: MarketModel, n: int = 400) -> NDArray[np.float64]:
    t = np.linspace(0.0, model.T, n + 1)
    bp = model.breakpoints()
    return np.unique(np.concatenate([t, bp, np.maximum(bp - 1e-12, 0.0)]))


def _first_violation(t, ok):
    bad = np.flatnonzero(~ok)
    return None if bad.size == 0 else float(np.ravel(t)[bad[0]])


def validate_model(model: MarketModel) -> ValidationReport:
    """Check the boundedness/positivity hypotheses on a dense probe grid.

    Piecewise coefficients are also probed at their breakpoints, so for the
    supported coefficient families the grid check is exact.
    """
    checks = []
    t = _probe_times(model)
    C, Lam = model.C, model.Lambda

    lam = model.lam(t)
    ok = lam >= 0.0
    checks.append(HypothesisCheck("H2 intensity non-negative", bool(ok.all()),
                                  "" if ok.all() else f"lambda < 0 at t={_first_violation(t, ok)}"))
    ok = np.isfinite(Lam) & (lam <= Lam)
    checks.append(HypothesisCheck("H2 intensity below Lambda", bool(np.all(ok)),
                                  "" if np.all(ok) else
                                  f"lambda exceeds Lambda={Lam} at t={_first_violation(t, ok)}"))

    r0 = model.r0(t)
    ok = (r0 >= 0.0) & np.isfinite(r0)
    checks.append(HypothesisCheck("H3 r0 non-negative bounded", bool(ok.all()),
                                  "" if ok.all() else f"r0 invalid at t={_first_violation(t, ok)}"))
    tt, uu = np.meshgrid(t, t)
    mask = uu <= tt
    r1 = model.r1(tt, uu)[mask]
    ok = (r1 >= 0.0) & np.isfinite(r1)
    checks.append(HypothesisCheck("H3 r1 non-negative bounded", bool(ok.all()),
                                  "" if ok.all() else
                                  f"r1 invalid at t={_first_violation(tt[mask], ok)}"))

    c_ok = np.isfinite(C) and C > 0.0
    nu = model.nu(t)
    ok = (C > 0.0) & (np.abs(nu) <= C)
    checks.append(HypothesisCheck("H4 |nu| <= C", bool(np.all(ok)),
                                  "" if np.all(ok) else f"nu violates bound at t={_first_violation(t, ok)}"))
    sig = model.sigma(t)
    ok = c_ok & (sig >= (1.0 / C if c_ok else np.inf)) & (sig <= C)
    checks.append(HypothesisCheck("H4 1/C <= sigma <= C", bool(np.all(ok)),
                                  "" if np.all(ok) else
                                  f"sigma={float(np.ravel(sig)[~np.ravel(ok)][0])} outside "
                                  f"[1/C, C] at t={_first_violation(t, ok)}"))
    return ValidationReport(tuple(checks))


def default_bounds(r0, r1, nu, sigma, lam, T) -> tuple[float, float]:
    """Smallest admissible ``(C, Lambda)`` for the given coefficients."""
    smin, smax = sigma.value_range(T)
    inv = np.inf if smin <= 0.0 else 1.0 / smin
    C = max(nu.bound(T), smax, inv)
    return float(C), float(lam.value_range(T)[1])


def make_model(p, T, r0, r1, nu, sigma, lam, x0=1.0, Lambda=None, C=None) -> MarketModel:
    """Convenience constructor; bare numbers become constant coefficients."""
    def coef(c):
        return c if isinstance(c, CoefficientFn) else CoefficientFn.constant(c)

    r0, r1, nu, sigma, lam = map(coef, (r0, r1, nu, sigma, lam))
    C_def, L_def = default_bounds(r0, r1, nu, sigma, lam, T)
    return MarketModel(UtilityParams(p, x0), float(T), r0, r1, nu, sigma, lam,
                       Lambda=L_def if Lambda is None else float(Lambda),
                       C=C_def if C is None else float(C))


def reference_model() -> MarketModel:
    """The desk-scale regime model used by the verification suite."""
    return make_model(p=0.5, T=1.0, r0=0.02, r1=0.05, nu=0.07, sigma=0.25, lam=0.3, x0=1.0)
