import numpy as np
import pytest
from sklearn.base import clone

from conftest import binary_item, linear_item
from procdif.exceptions import ConditionNotMetError, DataError, DegenerateGeometryError
from procdif.model_core import ItemDataset
from procdif.surrogate import (
    NuisanceSurrogate,
    analytic_gradient_check,
    closed_form_intermediates,
    closed_form_omega,
    fit_surrogate,
    numeric_omega,
    objective_L,
    objective_without_nuisance,
    residualize,
)


def lr_oracle(y, X, z, theta, omega):
    """Gaussian likelihood-ratio statistic via plain least squares."""
    n = y.size
    base = np.column_stack([np.ones(n), theta, X @ omega])
    rss = []
    for design in (base, np.column_stack([base, z])):
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        rss.append(np.sum((y - design @ coef) ** 2))
    return 0.5 * n * np.log(rss[0] / rss[1])


def test_objective_matches_least_squares_oracle(rng):
    y, X, z, theta = linear_item(rng)
    ds = ItemDataset(y, X, z, theta)
    for _ in range(5):
        omega = rng.standard_normal(X.shape[1])
        omega /= np.linalg.norm(omega)
        assert objective_L(omega, ds, "identity") == pytest.approx(
            lr_oracle(y, X, z, theta, omega), rel=1e-9, abs=1e-10
        )


def test_residualize_orthogonality_and_whitening(rng):
    y, X, z, theta = linear_item(rng)
    res = residualize(ItemDataset(y, X, z, theta))
    basis = np.column_stack([np.ones_like(theta), theta])
    for arr in (res.y_dag, res.z_dag, res.x_dag):
        np.testing.assert_allclose(basis.T @ arr, 0.0, atol=1e-9)
    np.testing.assert_allclose(res.x_dag.T @ res.x_dag, np.eye(res.x_dag.shape[1]), atol=1e-8)


def test_residualize_when_theta_is_already_orthogonal():
    n = 8
    theta = np.array([1, -1, 1, -1, 1, -1, 1, -1], dtype=float)
    y = np.array([1, 1, 2, 2, 3, 3, 4, 4], dtype=float)
    z = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=float)
    X = np.column_stack([y, y**2 + y + 1])
    res = residualize(ItemDataset(y, X, z, theta))
    np.testing.assert_allclose(res.y_dag, y - y.mean(), atol=1e-12)


def test_residualize_drops_collinear_feature(rng):
    y, X, z, theta = linear_item(rng, k=3)
    X = np.column_stack([X, X[:, 0] + X[:, 1]])
    res = residualize(ItemDataset(y, X, z, theta))
    assert res.x_dag.shape[1] == 3


def test_residualize_rejects_constant_theta(rng):
    y, X, z, _ = linear_item(rng)
    with pytest.raises(DataError):
        residualize(ItemDataset(y, X, z, np.ones_like(y)))


def test_closed_form_zero_and_root_geometry(rng):
    y, X, z, theta = linear_item(rng, k=6)
    ds = ItemDataset(y, X, z, theta)
    res = residualize(ds)
    result, inter = closed_form_omega(res)
    assert inter.condition_holds
    assert inter.alpha**2 + inter.beta**2 == pytest.approx(1.0, abs=1e-10)
    assert np.linalg.norm(result.omega) == pytest.approx(1.0, abs=1e-12)
    assert result.objective_value <= 1e-8
    assert lr_oracle(y, X, z, theta, result.omega) <= 1e-8
    # both analytic roots are zeros of the quadratic form and of the objective
    for w in (inter.omega_whitened, inter.omega_alternative):
        assert abs(w @ inter.matrix @ w) <= 1e-9 * np.linalg.norm(inter.matrix)
        omega = res.whitening_map @ w
        assert lr_oracle(y, X, z, theta, omega / np.linalg.norm(omega)) <= 1e-8
    zd = res.z_dag[:, 0] * (-1 if inter.z_flipped else 1)
    cos = [
        (res.x_dag @ w) @ zd / np.linalg.norm(res.x_dag @ w)
        for w in (inter.omega_whitened, inter.omega_alternative)
    ]
    assert cos[0] >= cos[1]
    assert result.method == "closed_form"


def test_condition_failure_falls_back_to_numeric(rng):
    n = 300
    theta = rng.standard_normal(n)
    z = (rng.random(n) < 0.5).astype(float)
    X = rng.standard_normal((n, 3))
    y = theta + 3.0 * z + 0.1 * rng.standard_normal(n)
    ds = ItemDataset(y, X, z, theta)
    inter = closed_form_intermediates(residualize(ds))
    assert not inter.condition_holds and inter.s1 >= 0
    with pytest.raises(ConditionNotMetError):
        closed_form_omega(residualize(ds))
    result = fit_surrogate(ds, "identity", random_state=0)
    assert result.method == "numeric"
    assert result.objective_value <= objective_without_nuisance(ds, "identity") + 1e-9


def test_collinear_geometry_is_reported(rng):
    n = 100
    theta = rng.standard_normal(n)
    z = (rng.random(n) < 0.5).astype(float)
    X = np.column_stack([z + 0.1 * rng.standard_normal(n), rng.standard_normal(n)])
    ds = ItemDataset(theta + 2 * z, X, z, theta)
    with pytest.raises(DegenerateGeometryError):
        closed_form_omega(residualize(ds))


@pytest.mark.parametrize(
    "link,nonuniform", [("identity", False), ("identity", True), ("logit", False), ("probit", True)]
)
def test_gradient_matches_finite_differences(rng, link, nonuniform):
    if link == "identity":
        y, X, z, theta = linear_item(rng, n=200, k=4)
    else:
        y, X, z, theta = binary_item(rng, n=300, k=4, link=link)
    ds = ItemDataset(y, X, z, theta)
    for _ in range(3):
        omega = rng.standard_normal(4)
        assert analytic_gradient_check(ds, link, omega / np.linalg.norm(omega), nonuniform) <= 1e-3


def test_numeric_improves_on_every_start_and_is_seeded(rng):
    y, X, z, theta = binary_item(rng, n=300, k=4)
    ds = ItemDataset(y, X, z, theta)
    a = numeric_omega(ds, "logit", restarts=4, random_state=3)
    b = numeric_omega(ds, "logit", restarts=4, random_state=3)
    np.testing.assert_array_equal(a.omega, b.omega)
    assert all(f <= s + 1e-12 for f, s in zip(a.final_values, a.start_values))
    assert a.objective_value <= min(a.start_values) + 1e-9
    assert a.restarts_used == 4
    assert a.objective_value <= 0.1 * objective_without_nuisance(ds, "logit")


def test_informed_start_for_identity_link(rng):
    y, X, z, theta = linear_item(rng)
    groups = np.column_stack([z, (rng.random(z.size) < 0.5).astype(float)])
    ds = ItemDataset(y, X, groups, theta)
    result = numeric_omega(ds, "identity", restarts=2, random_state=0)
    assert result.restarts_used == 3
    logit_ds = ItemDataset(*binary_item(rng, n=200)[:1], *binary_item(rng, n=200)[1:])
    assert numeric_omega(logit_ds, "logit", restarts=2, random_state=0).restarts_used == 2


def test_numeric_needs_two_features(rng):
    y, X, z, theta = linear_item(rng, k=1)
    with pytest.raises(DataError):
        numeric_omega(ItemDataset(y, X, z, theta), "identity")


def test_nuisance_surrogate_estimator(rng):
    y, X, z, theta = linear_item(rng)
    est = NuisanceSurrogate()
    out = est.fit(X, y, theta=theta, groups=z).transform(X)
    assert out.shape == (y.size, 1)
    np.testing.assert_allclose(out[:, 0], X @ est.omega_)
    assert est.objective_ <= 1e-8 < est.objective_before_
    assert clone(est).get_params() == est.get_params()
