import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from regimeopt import make_model, reference_model, solve_dual

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def ref():
    return reference_model()


@pytest.fixture(scope="session")
def ref_dual(ref):
    return solve_dual(ref, 1000)


@pytest.fixture(scope="session")
def zero_model():
    return make_model(p=0.5, T=1.0, r0=0.0, r1=0.0, nu=0.0, sigma=0.25, lam=0.0)


@pytest.fixture(scope="session")
def same_regime_model():
    return make_model(p=0.5, T=1.0, r0=0.03, r1=0.03, nu=0.07, sigma=0.25, lam=0.3)


def const_k(p, r, theta):
    q = p / (p - 1.0)
    return q * r - 0.5 * q * (q - 1.0) * theta**2


def phi1_const(k, tau):
    """``1/k + (1 - 1/k) e^{-k tau}`` for time-to-maturity ``tau`` (``1 + tau`` at k=0)."""
    if k == 0.0:
        return 1.0 + tau
    return 1.0 / k + (1.0 - 1.0 / k) * np.exp(-k * tau)
