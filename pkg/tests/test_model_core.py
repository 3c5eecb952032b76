import warnings

import numpy as np
import pytest
from scipy import optimize, stats
from scipy.special import expit, log_ndtr

from procdif.exceptions import (
    DataError,
    NumericalError,
    RankDeficientError,
    SeparationWarning,
    VarianceFloorWarning,
)
from procdif.model_core import (
    ItemDataset,
    LinkKind,
    NuisanceScores,
    design_matrix,
    fit_glm,
    log_likelihood,
    wald_from_estimate,
    wald_test,
)


def _negloglik(link, y, X):
    def f(b):
        lin = X @ b
        if link == "logit":
            return -np.sum(y * lin - np.logaddexp(0, lin))
        q = 2 * y - 1
        return -np.sum(log_ndtr(q * lin))

    return f


def _numeric_hessian(f, b, h=1e-4):
    p = b.size
    H = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            e_i, e_j = np.eye(p)[i] * h, np.eye(p)[j] * h
            H[i, j] = (f(b + e_i + e_j) - f(b + e_i - e_j) - f(b - e_i + e_j) + f(b - e_i - e_j)) / (4 * h * h)
    return H


def test_identity_fit_matches_least_squares(rng):
    n = 200
    theta = rng.standard_normal(n)
    eta = rng.standard_normal(n)
    z = (rng.random(n) < 0.5).astype(float)
    y = 0.5 + 1.5 * theta - 0.7 * eta + 0.3 * z + rng.standard_normal(n)
    fit = fit_glm("identity", y, theta, eta=eta, groups=z)
    X = np.column_stack([np.ones(n), theta, eta, z])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    np.testing.assert_allclose(fit.coef, coef, atol=1e-10)
    rss = np.sum((y - X @ coef) ** 2)
    assert fit.sigma2 == pytest.approx(rss / n, rel=1e-12)
    assert fit.loglik == pytest.approx(-0.5 * n * (np.log(2 * np.pi * rss / n) + 1), rel=1e-12)
    se = np.sqrt(np.diag(rss / n * np.linalg.inv(X.T @ X)))
    np.testing.assert_allclose(fit.se, se, rtol=1e-8)
    assert fit.names == ["d", "a0", "a1", "lambda0"]


@pytest.mark.parametrize("link", ["logit", "probit"])
def test_binary_fit_matches_generic_optimizer(rng, link):
    n = 600
    theta = rng.standard_normal(n)
    z = (rng.random(n) < 0.5).astype(float)
    lin = -0.3 + 1.2 * theta + 0.5 * z
    p = expit(lin) if link == "logit" else stats.norm.cdf(lin)
    y = (rng.random(n) < p).astype(float)
    fit = fit_glm(link, y, theta, groups=z)
    X = np.column_stack([np.ones(n), theta, z])
    f = _negloglik(link, y, X)
    ref = optimize.minimize(f, np.zeros(3), method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(fit.coef, ref.x, atol=1e-5)
    assert fit.loglik == pytest.approx(-ref.fun, abs=1e-8)
    assert fit.converged
    se = np.sqrt(np.diag(np.linalg.inv(_numeric_hessian(f, fit.coef))))
    np.testing.assert_allclose(fit.se, se, rtol=1e-3)


def test_log_likelihood_matches_direct_formula(rng):
    n = 50
    theta = rng.standard_normal(n)
    y = (rng.random(n) < 0.5).astype(float)
    X, _ = design_matrix(theta)
    b = np.array([0.2, -0.4])
    direct = np.sum(y * np.log(expit(X @ b)) + (1 - y) * np.log(1 - expit(X @ b)))
    assert log_likelihood("logit", y, X, b) == pytest.approx(direct, rel=1e-12)


def test_wald_two_sided():
    w = wald_from_estimate(1.959963984540054, 1.0)
    assert w.p_value == pytest.approx(0.05, abs=1e-12)
    assert wald_from_estimate(-2.0, 1.0).p_value == pytest.approx(wald_from_estimate(2.0, 1.0).p_value)
    with pytest.raises(NumericalError):
        wald_from_estimate(1.0, 0.0)


def test_wald_test_by_name_and_index(rng):
    n = 300
    theta = rng.standard_normal(n)
    z = (rng.random(n) < 0.5).astype(float)
    y = theta + 0.5 * z + rng.standard_normal(n)
    fit = fit_glm("identity", y, theta, groups=z)
    by_name = wald_test(fit, "lambda0")
    assert by_name == wald_test(fit, 2)
    assert by_name.z == pytest.approx(fit.coef[2] / fit.se[2])


def test_rank_deficiency_names_dependent_column(rng):
    theta = rng.standard_normal(100)
    y = theta + rng.standard_normal(100)
    with pytest.raises(RankDeficientError) as err:
        fit_glm("identity", y, theta, eta=2 * theta)
    assert any(n in str(err.value) for n in ("a0", "a1"))


def test_separation_is_flagged(rng):
    theta = np.linspace(-3, 3, 200)
    y = (theta > 0).astype(float)
    with pytest.warns(SeparationWarning):
        fit = fit_glm("logit", y, theta)
    assert fit.separated and not fit.converged
    with pytest.raises(NumericalError):
        wald_test(fit, "a0")


def test_exact_fit_hits_variance_floor(rng):
    theta = rng.standard_normal(40)
    y = 1.0 + 2.0 * theta
    fit = fit_glm("identity", y, theta)
    assert fit.sigma2_floored and fit.sigma2 == 1e-12
    X, _ = design_matrix(theta)
    with pytest.warns(VarianceFloorWarning):
        log_likelihood("identity", y, X, fit.coef)


def test_binary_link_rejects_real_responses(rng):
    with pytest.raises(DataError):
        fit_glm("logit", rng.standard_normal(20), rng.standard_normal(20))


def test_item_dataset_validation(rng):
    n = 30
    y, X, theta = rng.standard_normal(n), rng.standard_normal((n, 3)), rng.standard_normal(n)
    z = np.r_[np.zeros(15), np.ones(15)]
    ds = ItemDataset(y, X, z, theta)
    assert (ds.n, ds.k, ds.m) == (30, 3, 1)
    with pytest.raises(DataError):
        ItemDataset(y, X, np.zeros(n), theta)
    with pytest.raises(DataError):
        ItemDataset(y[:-1], X, z, theta)
    bad = y.copy()
    bad[3] = np.nan
    with pytest.raises(DataError):
        ItemDataset(bad, X, z, theta)
    with pytest.raises(DataError):
        ds.check_link("logit")


def test_nuisance_scores_require_unit_norm(rng):
    X = rng.standard_normal((10, 3))
    with pytest.raises(ValueError):
        NuisanceScores(X @ np.ones(3), np.ones(3))
    s = NuisanceScores.from_features(X, np.array([3.0, 0.0, 4.0]))
    np.testing.assert_allclose(s.omega, [0.6, 0.0, 0.8])
    np.testing.assert_allclose(s.eta, X @ s.omega)


@pytest.mark.parametrize("link", list(LinkKind))
def test_link_round_trip(link):
    mu = np.array([0.1, 0.35, 0.5, 0.9])
    np.testing.assert_allclose(link.inverse(link.link(mu)), mu, atol=1e-14)


def test_no_warning_on_ordinary_fit(rng):
    theta = rng.standard_normal(200)
    y = (rng.random(200) < expit(theta)).astype(float)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_glm("logit", y, theta)
