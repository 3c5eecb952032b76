"""Nuisance-trait surrogate construction.

A surrogate is a unit-norm linear combination ``eta = X @ omega`` of an item's
process features, chosen to minimize the likelihood-ratio statistic of the
grouping covariates given ``(1, theta, eta)``.  For the identity link with one
grouping variable a zero of the objective is available in closed form; all
other cases are handled by multi-start quasi-Newton minimization over the
unit sphere.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix, unit
from .exceptions import (
    ConditionNotMetError,
    DataError,
    DegenerateGeometryError,
    NumericalError,
)
from .model_core import (
    ItemDataset,
    LinkKind,
    NuisanceScores,
    as_link,
    design_matrix,
    fit_design,
    linear_predictor_score,
)

logger = logging.getLogger(__name__)

RANK_CUTOFF = 1e-8
DEFAULT_RESTARTS = 8
DEFAULT_TIE_TOL = 1e-6


@dataclass
class ResidualizedData:
    """Item data with the ``(1, theta)`` component removed and features whitened.

    ``x_dag = (features residualized) @ whitening_map`` has orthonormal columns.
    """

    y_dag: np.ndarray
    z_dag: np.ndarray
    x_dag: np.ndarray
    whitening_map: np.ndarray
    singular_values: np.ndarray
    dataset: ItemDataset


@dataclass
class ClosedFormIntermediates:
    y_hat: np.ndarray
    z_hat: np.ndarray
    yz_dag: float
    s1: float
    s2: float
    s_rest: float
    q1: np.ndarray
    q2: np.ndarray
    alpha: float
    beta: float
    condition_holds: bool
    z_flipped: bool
    omega_whitened: np.ndarray
    omega_alternative: np.ndarray

    @property
    def matrix(self):
        """The quadratic form whose zeros on the sphere are the zeros of L."""
        k = self.y_hat.shape[0]
        outer = np.outer(self.y_hat, self.z_hat)
        return self.yz_dag * np.eye(k) - 0.5 * (outer + outer.T)


@dataclass
class SurrogateResult:
    scores: NuisanceScores
    objective_value: float
    method: str
    restarts_used: int
    group_count: int
    converged: bool = True
    start_values: list = field(default_factory=list)
    final_values: list = field(default_factory=list)
    chosen_start: int = 0

    @property
    def omega(self):
        return self.scores.omega

    @property
    def eta(self):
        return self.scores.eta


def _residual_projector(theta):
    design = np.column_stack([np.ones_like(theta), theta])
    q, _ = np.linalg.qr(design)
    return q


def project_out(q, a):
    """Residual of ``a`` (vector or matrix) after projection on ``span(q)``."""
    return a - q @ (q.T @ a)


def residualize(dataset):
    """Regress responses, groups and features on ``(1, theta)`` and whiten features.

    Whitening uses the thin SVD of the residualized features, dropping
    directions with singular value below ``1e-8`` times the largest.
    """
    theta = dataset.theta
    if np.ptp(theta) == 0:
        raise DataError("theta is constant; cannot residualize on (1, theta)")
    q = _residual_projector(theta)
    y_dag = project_out(q, dataset.responses)
    z_dag = project_out(q, dataset.groups)
    x_res = project_out(q, dataset.features)
    u, s, vt = np.linalg.svd(x_res, full_matrices=False)
    scale = np.linalg.norm(dataset.features) + 1.0
    if s.size == 0 or s[0] <= 1e-12 * scale:
        raise DataError("features carry no information beyond theta")
    keep = s > RANK_CUTOFF * s[0]
    whitening = vt[keep].T / s[keep]
    return ResidualizedData(
        y_dag=y_dag,
        z_dag=z_dag,
        x_dag=u[:, keep],
        whitening_map=whitening,
        singular_values=s,
        dataset=dataset,
    )


def grouping_columns(dataset, nonuniform=False):
    """Grouping covariates entering the objective.

    With ``nonuniform`` each column ``Z_m`` is followed by ``Z_m * theta``.
    """
    z = dataset.groups
    if not nonuniform:
        return z
    cols = []
    for m in range(z.shape[1]):
        cols.append(z[:, m])
        cols.append(z[:, m] * dataset.theta)
    return np.column_stack(cols) if cols else z


class _ObjectiveEvaluator:
    """Objective and gradient over an unconstrained direction vector.

    Holds warm starts for the inner binary-response fits; one instance per
    optimization run, never shared.
    """

    def __init__(self, dataset, link, nonuniform=False):
        self.dataset = dataset
        self.link = as_link(link)
        self.groups = grouping_columns(dataset, nonuniform)
        if self.groups.shape[1] == 0:
            raise DataError("the objective needs at least one grouping column")
        self.base, _ = design_matrix(dataset.theta)
        self._starts = {}
        self.n_evals = 0
        self.all_converged = True

    def _fit(self, key, X, names):
        start = self._starts.get(key) if self.link.is_binary else None
        fit = fit_design(
            self.link, self.dataset.responses, X, names, start=start, check_rank=False
        )
        if not fit.converged:
            # retry from scratch; a stale warm start can stall Newton near separation
            fit = fit_design(
                self.link, self.dataset.responses, X, names, check_rank=False
            )
        if self.link.is_binary and np.all(np.isfinite(fit.coef)):
            self._starts[key] = fit.coef
        self.all_converged &= bool(fit.converged)
        return fit

    def _score(self, fit, X):
        lin = X @ fit.coef
        return linear_predictor_score(self.link, self.dataset.responses, lin, fit.sigma2)

    def value_and_grad_omega(self, omega, need_grad=True):
        self.n_evals += 1
        eta = self.dataset.features @ omega
        x_red = np.column_stack([self.base, eta])
        red = self._fit("reduced", x_red, ["d", "a0", "a1"])
        m = self.groups.shape[1]
        value = 0.0
        grad = np.zeros_like(omega) if need_grad else None
        if need_grad:
            s_red = self._score(red, x_red)
            grad -= m * red.coef[2] * (self.dataset.features.T @ s_red)
        for j in range(m):
            x_full = np.column_stack([x_red, self.groups[:, j]])
            full = self._fit(("full", j), x_full, ["d", "a0", "a1", "lambda0"])
            # nested fits: negative differences are round-off only
            value += max(full.loglik - red.loglik, 0.0)
            if need_grad:
                s_full = self._score(full, x_full)
                grad += full.coef[2] * (self.dataset.features.T @ s_full)
        return value, grad

    def __call__(self, v):
        nrm = np.linalg.norm(v)
        omega = v / nrm
        value, g = self.value_and_grad_omega(omega)
        grad_v = (g - omega * (omega @ g)) / nrm
        return value, grad_v


def objective_L(omega, dataset, link, nonuniform=False):
    """Likelihood-ratio objective of the grouping covariates given ``X @ omega``.

    Multiple grouping columns contribute additively, one nested comparison per
    column. Returns a nonnegative float (up to round-off).
    """
    omega = unit(omega)
    ev = _ObjectiveEvaluator(dataset, link, nonuniform)
    value, _ = ev.value_and_grad_omega(omega, need_grad=False)
    return float(value)


def objective_details(omega, dataset, link, nonuniform=False):
    """Objective value, gradient in ``omega`` and inner-fit convergence flag."""
    omega = unit(omega)
    ev = _ObjectiveEvaluator(dataset, link, nonuniform)
    value, grad = ev.value_and_grad_omega(omega)
    return float(value), grad, ev.all_converged


def objective_without_nuisance(dataset, link, nonuniform=False):
    """The same statistic for the model with no nuisance term at all."""
    link = as_link(link)
    groups = grouping_columns(dataset, nonuniform)
    base, _ = design_matrix(dataset.theta)
    red = fit_design(link, dataset.responses, base, ["d", "a0"])
    total = 0.0
    for j in range(groups.shape[1]):
        full = fit_design(
            link,
            dataset.responses,
            np.column_stack([base, groups[:, j]]),
            ["d", "a0", "lambda0"],
        )
        total += max(full.loglik - red.loglik, 0.0)
    return float(total)


def closed_form_intermediates(res):
    """Quantities behind the closed-form zero of the linear-model objective."""
    if res.z_dag.shape[1] != 1:
        raise ValueError("the closed form applies to exactly one grouping variable")
    y_dag = res.y_dag
    z_dag = res.z_dag[:, 0]
    c = float(y_dag @ z_dag)
    flipped = c < 0
    if flipped:
        z_dag = -z_dag
        c = -c
    y_hat = res.x_dag.T @ y_dag
    z_hat = res.x_dag.T @ z_dag
    ny = float(np.linalg.norm(y_hat))
    nz = float(np.linalg.norm(z_hat))
    yz = float(y_hat @ z_hat)
    prod = ny * nz
    if prod == 0.0:
        raise DegenerateGeometryError(
            "projected responses or group vector vanish; use the numeric optimizer"
        )
    diff = ny * z_hat - nz * y_hat
    if np.linalg.norm(diff) < 1e-10 * prod:
        raise DegenerateGeometryError(
            "projected responses and group vector are collinear; "
            "use the numeric optimizer"
        )
    s1 = c - 0.5 * (prod + yz)
    s2 = c + 0.5 * (prod - yz)
    margin = 1e-12 * (prod + abs(c))
    holds = bool(s1 < -margin and s2 > margin)
    summ = ny * z_hat + nz * y_hat
    q1 = summ / np.linalg.norm(summ) if np.linalg.norm(summ) > 0 else np.zeros_like(summ)
    q2 = diff / np.linalg.norm(diff)
    if holds:
        alpha = float(np.sqrt(s2 / (s2 - s1)))
        beta = float(np.sqrt(-s1 / (s2 - s1)))
    else:
        alpha = beta = float("nan")
    return ClosedFormIntermediates(
        y_hat=y_hat,
        z_hat=z_hat,
        yz_dag=c,
        s1=float(s1),
        s2=float(s2),
        s_rest=c,
        q1=q1,
        q2=q2,
        alpha=alpha,
        beta=beta,
        condition_holds=holds,
        z_flipped=bool(flipped),
        omega_whitened=alpha * q1 + beta * q2,
        omega_alternative=alpha * q1 - beta * q2,
    )


def to_feature_coordinates(res, omega_whitened):
    """Map a whitened-coordinate direction to a unit vector on the raw features."""
    return unit(res.whitening_map @ omega_whitened)


def closed_form_omega(res):
    """Closed-form zero of the identity-link objective with one grouping variable.

    Returns ``(SurrogateResult, ClosedFormIntermediates)``. The root whose
    whitened score has the larger cosine with the (sign-normalized) residual
    group vector is returned.

    Raises
    ------
    ConditionNotMetError
        The existence condition fails; fall back to :func:`numeric_omega`.
    DegenerateGeometryError
        Projected responses and groups are collinear or vanish.
    """
    inter = closed_form_intermediates(res)
    if not inter.condition_holds:
        raise ConditionNotMetError(
            "closed-form existence condition fails "
            f"(s1={inter.s1:.6g}, s2={inter.s2:.6g}); use the numeric optimizer"
        )
    omega = to_feature_coordinates(res, inter.omega_whitened)
    ds = res.dataset
    scores = NuisanceScores.from_features(ds.features, omega)
    value = objective_L(scores.omega, ds, LinkKind.IDENTITY)
    return (
        SurrogateResult(
            scores=scores,
            objective_value=value,
            method="closed_form",
            restarts_used=0,
            group_count=ds.m,
        ),
        inter,
    )


def informed_start(dataset):
    """Identity-link closed form on the first grouping column, or ``None``."""
    if dataset.m < 1:
        return None
    try:
        sub = ItemDataset(
            dataset.responses, dataset.features, dataset.groups[:, :1], dataset.theta
        )
        res = residualize(sub)
        inter = closed_form_intermediates(res)
        if not inter.condition_holds:
            return None
        return to_feature_coordinates(res, inter.omega_whitened)
    except (DataError, NumericalError, ValueError):
        return None


def numeric_omega(
    dataset,
    link,
    nonuniform=False,
    restarts=DEFAULT_RESTARTS,
    random_state=None,
    informed="auto",
    tie_tol=DEFAULT_TIE_TOL,
    gtol=1e-6,
    maxiter=500,
):
    """Minimize the objective over the unit sphere from several starts.

    With ``informed="auto"`` start 0 is the closed form on the same data when
    the link is the identity and the closed form exists; ``True`` forces the
    attempt for any link and ``False`` disables it. Then ``restarts`` random
    unit vectors follow. The best achieved value wins;
    results within ``tie_tol`` of the best are tied and resolved by the lowest
    start index.
    """
    link = as_link(link)
    if dataset.k < 2:
        raise DataError("numeric optimization over the sphere needs K >= 2")
    rng = np.random.default_rng(random_state)
    starts = []
    if informed == "auto":
        informed = link is LinkKind.IDENTITY
    if informed:
        s0 = informed_start(dataset)
        if s0 is not None:
            starts.append(s0)
    for _ in range(restarts):
        starts.append(unit(rng.standard_normal(dataset.k)))

    runs = []
    for idx, v0 in enumerate(starts):
        ev = _ObjectiveEvaluator(dataset, link, nonuniform)
        f0, _ = ev(v0)
        try:
            out = minimize(
                ev,
                v0,
                jac=True,
                method="L-BFGS-B",
                options={"gtol": gtol, "maxiter": maxiter},
            )
            x, fx, ok = out.x, float(out.fun), bool(out.success)
        except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
            logger.debug("start %d failed: %s", idx, exc)
            x, fx, ok = v0, f0, False
        if not np.isfinite(fx) or fx > f0:
            x, fx = v0, f0
        failed = (not ok) and not fx < f0
        runs.append((idx, x, fx, f0, failed, ev.all_converged))
        logger.debug("start %d: %.3g -> %.3g (success=%s)", idx, f0, fx, ok)

    finite = [r for r in runs if np.isfinite(r[2])]
    if not finite or all(r[4] for r in runs):
        best = min(runs, key=lambda r: r[2] if np.isfinite(r[2]) else np.inf)
        raise NumericalError(
            "all starts failed to make progress; best value "
            f"{best[2]!r} from start {best[0]}"
        )
    best_value = min(r[2] for r in finite)
    chosen = next(r for r in finite if r[2] <= best_value + tie_tol)
    omega = unit(chosen[1])
    scores = NuisanceScores.from_features(dataset.features, omega)
    value = objective_L(omega, dataset, link, nonuniform)
    return SurrogateResult(
        scores=scores,
        objective_value=value,
        method="numeric",
        restarts_used=len(starts),
        group_count=grouping_columns(dataset, nonuniform).shape[1],
        converged=bool(chosen[5]),
        start_values=[r[3] for r in runs],
        final_values=[r[2] for r in runs],
        chosen_start=chosen[0],
    )


def analytic_gradient_check(dataset, link, omega, nonuniform=False, step=1e-5):
    """Largest deviation between the analytic gradient and central differences.

    Both are taken with respect to the unconstrained direction ``v`` at
    ``v = omega`` (the objective is evaluated at ``v / ||v||``).
    """
    omega = unit(omega)
    ev = _ObjectiveEvaluator(dataset, link, nonuniform)
    _, analytic = ev(omega)
    fd = np.empty_like(omega)
    for k in range(omega.shape[0]):
        e = np.zeros_like(omega)
        e[k] = step
        fp = objective_L(omega + e, dataset, link, nonuniform)
        fm = objective_L(omega - e, dataset, link, nonuniform)
        fd[k] = (fp - fm) / (2.0 * step)
    return float(np.max(np.abs(analytic - fd)))


def fit_surrogate(
    dataset,
    link,
    nonuniform=False,
    method="auto",
    restarts=DEFAULT_RESTARTS,
    random_state=None,
):
    """Build a surrogate, preferring the closed form whenever it applies."""
    link = as_link(link)
    if method not in ("auto", "closed_form", "numeric"):
        raise ValueError(f"unknown method {method!r}")
    closed_ok = link is LinkKind.IDENTITY and dataset.m == 1 and not nonuniform
    if method == "closed_form" and not closed_ok:
        raise ValueError("the closed form needs the identity link and one uniform group")
    if method in ("auto", "closed_form") and closed_ok:
        try:
            return closed_form_omega(residualize(dataset))[0]
        except (ConditionNotMetError, DegenerateGeometryError) as exc:
            if method == "closed_form":
                raise
            logger.info("closed form unavailable (%s); using numeric optimizer", exc)
    return numeric_omega(
        dataset, link, nonuniform=nonuniform, restarts=restarts, random_state=random_state
    )


class NuisanceSurrogate(TransformerMixin, BaseEstimator):
    """Estimator wrapper: learn ``omega`` from one item, then score features.

    Parameters
    ----------
    link : {"identity", "logit", "probit"}
    method : {"auto", "closed_form", "numeric"}
    nonuniform : bool
        Add the ``Z * theta`` interaction for every grouping column.
    restarts : int
        Random restarts for the numeric optimizer.
    random_state : int, numpy Generator or None

    Examples
    --------
    >>> sur = NuisanceSurrogate(link="identity").fit(X, y, theta=theta, groups=z)
    >>> eta_hat = sur.transform(X)[:, 0]
    """

    def __init__(
        self,
        link="identity",
        method="auto",
        nonuniform=False,
        restarts=DEFAULT_RESTARTS,
        random_state=None,
    ):
        self.link = link
        self.method = method
        self.nonuniform = nonuniform
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X, y, theta=None, groups=None):
        if theta is None or groups is None:
            raise TypeError("fit requires theta= and groups= keyword arguments")
        ds = ItemDataset(y, X, groups, theta).check_link(self.link)
        self.n_features_in_ = ds.k
        self.objective_before_ = objective_without_nuisance(
            ds, self.link, self.nonuniform
        )
        self.result_ = fit_surrogate(
            ds,
            self.link,
            nonuniform=self.nonuniform,
            method=self.method,
            restarts=self.restarts,
            random_state=self.random_state,
        )
        self.omega_ = self.result_.omega
        self.objective_ = self.result_.objective_value
        self.method_ = self.result_.method
        return self

    def transform(self, X):
        check_is_fitted(self, "omega_")
        X = as_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise DataError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return (X @ self.omega_)[:, None]
