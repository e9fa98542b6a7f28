import numpy as np
import pytest

from nsmpp import Domain, EventSequence


def central_diff(f, theta, h=1e-5):
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def grad_rel_err(analytic, numeric, floor=1e-3):
    """Max relative error; entries below ``floor * max|numeric|`` are compared at that scale.

    Central differences carry ~eps*|f|/h of round-off, so tiny entries cannot
    be resolved relatively.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.abs(numeric), floor * np.max(np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


@pytest.fixture
def dom1():
    return Domain(100.0)


@pytest.fixture
def dom2():
    return Domain(100.0, (0.0,), (100.0,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_sequence(rng, domain, n):
    t = np.sort(rng.uniform(0, domain.horizon_T, n))
    m = rng.uniform(domain.mark_lo, domain.mark_hi, (n, domain.mark_dim)) if domain.mark_dim \
        else np.empty((n, 0))
    return EventSequence(t, m, domain)
