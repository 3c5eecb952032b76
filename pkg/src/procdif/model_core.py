"""Generalized linear measurement model for a single item.

The item response depends on the target trait, an optional nuisance score and
optional grouping covariates through ``g(mu) = d + a0*theta + a1*eta + lambda'Z``.
Maximum likelihood fits use closed-form least squares for the identity link
and Newton-type iteratively reweighted least squares for the binary links.
"""

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np
from scipy import linalg, stats
from scipy.special import expit, log_ndtr, ndtr, ndtri

from ._validation import (
    as_matrix,
    as_vector,
    check_binary_responses,
    check_group_columns,
)
from .exceptions import (
    DataError,
    NumericalError,
    RankDeficientError,
    SeparationWarning,
    VarianceFloorWarning,
)

VARIANCE_FLOOR = 1e-12
LINPRED_CAP = 30.0
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
_LOG_2PI = np.log(2.0 * np.pi)


class LinkKind(str, Enum):
    IDENTITY = "identity"
    LOGIT = "logit"
    PROBIT = "probit"

    @property
    def is_binary(self):
        return self is not LinkKind.IDENTITY

    def link(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self is LinkKind.IDENTITY:
            return mu
        if self is LinkKind.LOGIT:
            return np.log(mu) - np.log1p(-mu)
        return ndtri(mu)

    def inverse(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self is LinkKind.IDENTITY:
            return eta
        if self is LinkKind.LOGIT:
            return expit(eta)
        return ndtr(eta)


def as_link(link):
    if isinstance(link, LinkKind):
        return link
    try:
        return LinkKind(str(link).lower())
    except ValueError:
        raise ValueError(
            f"unknown link {link!r}; expected one of identity, logit, probit"
        ) from None


@dataclass(frozen=True)
class ItemDataset:
    """Responses, process features, grouping covariates and traits for one item."""

    responses: np.ndarray
    features: np.ndarray
    groups: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        y = as_vector(self.responses, "responses")
        n = y.shape[0]
        if n < 2:
            raise DataError("an item dataset needs at least two respondents")
        x = as_matrix(self.features, "features", n=n, min_cols=1)
        z = as_matrix(self.groups, "groups", n=n)
        check_group_columns(z)
        theta = as_vector(self.theta, "theta", n=n)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "groups", z)
        object.__setattr__(self, "theta", theta)

    @property
    def n(self):
        return self.responses.shape[0]

    @property
    def k(self):
        return self.features.shape[1]

    @property
    def m(self):
        return self.groups.shape[1]

    def check_link(self, link):
        if as_link(link).is_binary:
            check_binary_responses(self.responses)
        return self


@dataclass(frozen=True)
class NuisanceScores:
    eta: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        if abs(np.linalg.norm(omega) - 1.0) > 1e-10:
            raise ValueError("omega must have unit Euclidean norm")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=float))

    @classmethod
    def from_features(cls, features, omega):
        omega = np.asarray(omega, dtype=float)
        omega = omega / np.linalg.norm(omega)
        return cls(eta=np.asarray(features, dtype=float) @ omega, omega=omega)


@dataclass
class GlmFit:
    """Maximum likelihood fit of one model specification.

    ``coef``, ``se`` and ``names`` are aligned; the named accessors ``d``,
    ``a0``, ``a1`` and ``lam`` pick out the conventional coefficients.
    """

    coef: np.ndarray
    se: np.ndarray
    names: list
    link: LinkKind
    loglik: float
    converged: bool
    iterations: int
    sigma2: Optional[float] = None
    gradient: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    sigma2_floored: bool = False
    separated: bool = False

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no coefficient named {name!r}") from None

    def get(self, name, default=None):
        return self.coef[self.index(name)] if name in self.names else default

    @property
    def d(self):
        return self.get("d")

    @property
    def a0(self):
        return self.get("a0")

    @property
    def a1(self):
        return self.get("a1")

    @property
    def lam(self):
        return np.array(
            [c for c, nm in zip(self.coef, self.names) if nm.startswith("lambda")]
        )


class WaldResult(NamedTuple):
    estimate: float
    se: float
    z: float
    p_value: float


def design_matrix(theta, eta=None, groups=None):
    """Columns ``(1, theta[, eta][, Z_1..Z_M])`` with their coefficient names."""
    theta = np.asarray(theta, dtype=float)
    cols = [np.ones_like(theta), theta]
    names = ["d", "a0"]
    if eta is not None:
        cols.append(np.asarray(eta, dtype=float))
        names.append("a1")
    if groups is not None:
        z = np.asarray(groups, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        for m in range(z.shape[1]):
            cols.append(z[:, m])
            names.append(f"lambda{m}")
    return np.column_stack(cols), names


def observation_terms(link, y, lin):
    """Per-observation log-likelihood, score and negative Hessian in ``lin``.

    Valid for the binary links only; ``lin`` is capped at +/-30 beforehand.
    """
    if link is LinkKind.LOGIT:
        p = expit(lin)
        ll = y * lin - np.logaddexp(0.0, lin)
        return ll, y - p, p * (1.0 - p)
    q = 2.0 * y - 1.0
    ql = q * lin
    logcdf = log_ndtr(ql)
    ratio = np.exp(stats.norm.logpdf(ql) - logcdf)
    return logcdf, q * ratio, ratio * (ql + ratio)


def linear_predictor_score(link, y, lin, sigma2=None):
    """Derivative of the log-likelihood with respect to each linear predictor.

    For the identity link ``sigma2`` is the (profiled) residual variance.
    """
    link = as_link(link)
    if link is LinkKind.IDENTITY:
        if sigma2 is None:
            sigma2 = max(np.mean((y - lin) ** 2), VARIANCE_FLOOR)
        return (y - lin) / sigma2
    _, score, _ = observation_terms(link, y, np.clip(lin, -LINPRED_CAP, LINPRED_CAP))
    return score


def _gaussian_profile_loglik(rss, n):
    sigma2 = rss / n
    floored = sigma2 < VARIANCE_FLOOR
    if floored:
        sigma2 = VARIANCE_FLOOR
    ll = -0.5 * n * (_LOG_2PI + np.log(sigma2)) - rss / (2.0 * sigma2)
    return ll, sigma2, floored


def log_likelihood(link, responses, design_matrix, coefficients):
    """Total log-likelihood of ``responses`` at the given coefficients.

    The identity link uses the Gaussian density with the profile variance
    ``RSS/N``, floored at 1e-12 (a :class:`VarianceFloorWarning` is issued).
    Non-finite results raise :class:`NumericalError`.
    """
    link = as_link(link)
    y = as_vector(responses, "responses")
    X = as_matrix(design_matrix, "design_matrix", n=y.shape[0])
    b = as_vector(coefficients, "coefficients")
    if X.shape[1] != b.shape[0]:
        raise DataError(
            f"design has {X.shape[1]} columns but {b.shape[0]} coefficients given"
        )
    lin = X @ b
    if link is LinkKind.IDENTITY:
        rss = float(np.sum((y - lin) ** 2))
        ll, _, floored = _gaussian_profile_loglik(rss, y.shape[0])
        if floored:
            warnings.warn(
                "residual variance floored at 1e-12", VarianceFloorWarning, stacklevel=2
            )
    else:
        check_binary_responses(y)
        ll = float(np.sum(observation_terms(link, y, lin)[0]))
    if not np.isfinite(ll):
        raise NumericalError("log-likelihood is not finite for these inputs")
    return float(ll)


def _check_rank(X, names):
    _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0:
        raise RankDeficientError(range(X.shape[1]), names)
    tol = max(X.shape) * np.finfo(float).eps * diag[0] * 1e3
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        raise RankDeficientError(sorted(piv[rank:]), names)


def _fit_identity(y, X, names):
    n = y.shape[0]
    q, r = np.linalg.qr(X)
    coef = linalg.solve_triangular(r, q.T @ y)
    resid = y - X @ coef
    rss = float(resid @ resid)
    ll, sigma2, floored = _gaussian_profile_loglik(rss, n)
    rinv = linalg.solve_triangular(r, np.eye(r.shape[0]))
    cov = sigma2 * (rinv @ rinv.T)
    return GlmFit(
        coef=coef,
        se=np.sqrt(np.clip(np.diag(cov), 0.0, None)),
        names=list(names),
        link=LinkKind.IDENTITY,
        loglik=float(ll),
        converged=True,
        iterations=1,
        sigma2=float(sigma2),
        gradient=X.T @ resid / sigma2,
        cov=cov,
        sigma2_floored=bool(floored),
    )


def _fit_binary(link, y, X, names, start, tol, max_iter):
    p = X.shape[1]
    if start is None:
        ybar = np.clip(y.mean(), 1e-3, 1 - 1e-3)
        b = np.zeros(p)
        b[0] = float(link.link(ybar))
    else:
        b = np.array(start, dtype=float)

    def evaluate(beta):
        lin = np.clip(X @ beta, -LINPRED_CAP, LINPRED_CAP)
        ll, score, w = observation_terms(link, y, lin)
        return float(np.sum(ll)), X.T @ score, w

    ll, grad, w = evaluate(b)
    it = 0
    converged = False
    while it < max_iter:
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        it += 1
        info = (X * w[:, None]).T @ X
        try:
            step = linalg.solve(info, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(info, grad)[0]
        t = 1.0
        for _ in range(40):
            b_new = b + t * step
            ll_new, grad_new, w_new = evaluate(b_new)
            if ll_new >= ll - 1e-12 * (1.0 + abs(ll)):
                break
            t *= 0.5
        small = np.max(np.abs(b_new - b)) <= 1e-14 * (1.0 + np.max(np.abs(b)))
        b, ll, grad, w = b_new, ll_new, grad_new, w_new
        if small:
            converged = np.max(np.abs(grad)) <= 1e3 * tol
            break
    lin = X @ b
    separated = bool(np.max(np.abs(lin)) > LINPRED_CAP)
    if separated:
        converged = False
        warnings.warn(
            "linear predictor exceeds the +/-30 cap (separation); fit flagged",
            SeparationWarning,
            stacklevel=3,
        )
    info = (X * w[:, None]).T @ X
    try:
        cov = linalg.inv(info)
    except linalg.LinAlgError:
        cov = linalg.pinv(info)
    return GlmFit(
        coef=b,
        se=np.sqrt(np.clip(np.diag(cov), 0.0, None)),
        names=list(names),
        link=link,
        loglik=ll,
        converged=converged,
        iterations=it,
        gradient=grad,
        cov=cov,
        separated=separated,
    )


def fit_design(
    link,
    responses,
    design,
    names=None,
    *,
    start=None,
    check_rank=True,
    tol=IRLS_TOL,
    max_iter=IRLS_MAX_ITER,
):
    """Maximum likelihood fit of the GLM with an explicit design matrix."""
    link = as_link(link)
    y = np.asarray(responses, dtype=float)
    X = np.asarray(design, dtype=float)
    if names is None:
        names = [f"x{i}" for i in range(X.shape[1])]
    if y.shape[0] < 2:
        raise DataError("at least two observations are required")
    if check_rank:
        _check_rank(X, names)
    if link is LinkKind.IDENTITY:
        return _fit_identity(y, X, names)
    return _fit_binary(link, y, X, names, start, tol, max_iter)


def fit_glm(link, responses, theta, eta=None, groups=None, *, start=None, check_rank=True):
    """Fit ``g(mu) = d + a0*theta [+ a1*eta] [+ lambda'Z]`` by maximum likelihood.

    Parameters
    ----------
    link : LinkKind or str
    responses : array of shape (N,)
    theta : array of shape (N,)
        Target-trait values (true or estimated).
    eta : array of shape (N,), optional
        Nuisance scores; omitted means ``a1`` is fixed at zero.
    groups : array of shape (N,) or (N, M), optional
        Grouping covariates; omitted means ``lambda`` is fixed at zero.

    Returns
    -------
    GlmFit
        Coefficients named ``d``, ``a0``, ``a1`` and ``lambda0..lambda{M-1}``.
    """
    link = as_link(link)
    y = as_vector(responses, "responses")
    if link.is_binary:
        check_binary_responses(y)
    X, names = design_matrix(as_vector(theta, "theta", n=y.shape[0]), eta, groups)
    if not np.all(np.isfinite(X)):
        raise DataError("covariates contain missing or non-finite values")
    return fit_design(link, y, X, names, start=start, check_rank=check_rank)


def wald_test(fit, which):
    """Two-sided Wald test of one coefficient (index or name)."""
    if not fit.converged:
        raise NumericalError("Wald test requires a converged fit")
    idx = fit.index(which) if isinstance(which, str) else int(which)
    if not -len(fit.coef) <= idx < len(fit.coef):
        raise IndexError(f"coefficient index {which} out of range")
    return wald_from_estimate(float(fit.coef[idx]), float(fit.se[idx]))


def wald_from_estimate(estimate, se):
    if not se > 0:
        raise NumericalError("standard error is zero (degenerate information)")
    z = estimate / se
    p = 2.0 * stats.norm.sf(abs(z))
    return WaldResult(estimate, se, z, float(p))
