import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "properties",
    max_examples=200,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
    derandomize=True,
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "properties"))


def linear_item(rng, n=300, k=5, a1=1.0, dif=0.8, noise=1.0):
    """Identity-link item whose group effect runs through a feature-based nuisance trait."""
    theta = rng.standard_normal(n)
    z = (rng.random(n) < 0.4).astype(float)
    z[:2] = [0.0, 1.0]
    X = rng.standard_normal((n, k)) + dif * z[:, None]
    omega = rng.exponential(1.0, k)
    omega /= np.linalg.norm(omega)
    eta = X @ omega
    y = 0.3 + 1.2 * theta + a1 * eta + noise * rng.standard_normal(n)
    return y, X, z, theta


def binary_item(rng, n=400, k=4, a1=1.0, dif=0.8, link="logit"):
    from scipy.special import expit, ndtr

    theta = rng.standard_normal(n)
    z = (rng.random(n) < 0.4).astype(float)
    z[:2] = [0.0, 1.0]
    X = rng.standard_normal((n, k)) + dif * z[:, None]
    omega = rng.exponential(1.0, k)
    omega /= np.linalg.norm(omega)
    lin = -0.2 + 1.1 * theta + a1 * (X @ omega)
    p = expit(lin) if link == "logit" else ndtr(lin)
    y = (rng.random(n) < p).astype(float)
    return y, X, z, theta


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _quiet_numerical_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield
