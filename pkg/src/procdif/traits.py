"""Target-trait estimation.

Initial traits come from DIF-free items: a maximum likelihood one-factor model
for continuous responses and a marginal maximum likelihood 2PL calibration
(EM with Gauss-Hermite quadrature) for binary responses. Corrected traits are
per-respondent maximum likelihood estimates under the calibrated item bank,
where DIF items carry their nuisance surrogate.
"""

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit
from scipy.stats import norm
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix, check_binary_responses
from .exceptions import DataError, HeywoodWarning, NumericalError, VarianceFloorWarning
from .model_core import (
    LINPRED_CAP,
    VARIANCE_FLOOR,
    LinkKind,
    as_link,
    fit_glm,
    observation_terms,
)

THETA_BOUNDS = (-6.0, 6.0)
UNIQUENESS_FLOOR = 1e-3
PROVENANCES = ("initial", "dif_corrected", "benchmark_uncorrected")


@dataclass
class ItemParams:
    """Calibrated parameters of one item.

    ``eta`` holds the respondent-level nuisance surrogate for DIF items and is
    ``None`` for clean items (whose ``a1`` is then zero).
    """

    link: LinkKind
    d: float
    a0: float
    a1: float = 0.0
    sigma2: Optional[float] = None
    eta: Optional[np.ndarray] = None
    omega: Optional[np.ndarray] = None
    name: Optional[str] = None

    def __post_init__(self):
        self.link = as_link(self.link)
        if self.link is LinkKind.IDENTITY and (self.sigma2 is None or self.sigma2 <= 0):
            raise ValueError("identity-link items need a positive sigma2")
        if self.eta is not None:
            self.eta = np.asarray(self.eta, dtype=float)

    @property
    def has_nuisance(self):
        return self.eta is not None

    def with_eta(self, eta):
        """Copy carrying new nuisance scores, e.g. for fresh respondents."""
        return replace(self, eta=np.asarray(eta, dtype=float))

    def offset(self, n):
        base = np.full(n, float(self.d))
        if self.eta is not None:
            base = base + self.a1 * self.eta
        return base


@dataclass
class ItemBank:
    items: list
    dif_set: frozenset = frozenset()

    def __post_init__(self):
        self.dif_set = frozenset(int(j) for j in self.dif_set)
        for j, item in enumerate(self.items):
            if j in self.dif_set and not item.has_nuisance:
                raise ValueError(f"DIF item {j} lacks nuisance scores")
            if j not in self.dif_set and (item.has_nuisance or item.a1 != 0.0):
                raise ValueError(f"clean item {j} must not carry a nuisance term")

    def __len__(self):
        return len(self.items)

    def subset(self, indices):
        indices = list(indices)
        return ItemBank(
            [self.items[j] for j in indices],
            frozenset(i for i, j in enumerate(indices) if j in self.dif_set),
        )


@dataclass
class TraitEstimates:
    theta: np.ndarray
    provenance: str
    bounds_hit: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.theta = np.asarray(self.theta, dtype=float)
        self.bounds_hit = np.asarray(self.bounds_hit, dtype=bool)


# --- one-factor model -------------------------------------------------------


@dataclass
class FactorSolution:
    mean: np.ndarray
    loadings: np.ndarray
    uniquenesses: np.ndarray
    loglik_history: list
    converged: bool
    heywood: bool
    score_mean: float = 0.0
    score_sd: float = 1.0

    def scores(self, responses):
        """Regression factor scores, standardized with the calibration moments."""
        lam, psi = self.loadings, self.uniquenesses
        sigma = np.outer(lam, lam) + np.diag(psi)
        weights = np.linalg.solve(sigma, lam)
        raw = (np.asarray(responses, dtype=float) - self.mean) @ weights
        return (raw - self.score_mean) / self.score_sd


def _fa_loglik(S, lam, psi, n):
    p = S.shape[0]
    sigma = np.outer(lam, lam) + np.diag(psi)
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0:
        return -np.inf
    return -0.5 * n * (p * np.log(2 * np.pi) + logdet + np.trace(np.linalg.solve(sigma, S)))


def one_factor_ml(responses, tol=1e-6, max_iter=20000):
    """Maximum likelihood one-factor model fitted by EM.

    Uniquenesses below 1e-3 are floored (Heywood case) and flagged.
    """
    Y = as_matrix(responses, "responses")
    n, p = Y.shape
    if p < 3:
        raise DataError("a one-factor model needs at least three items")
    mean = Y.mean(axis=0)
    S = np.cov(Y, rowvar=False, bias=True)
    evals, evecs = np.linalg.eigh(S)
    lam = evecs[:, -1] * np.sqrt(max(evals[-1], 1e-12))
    psi = np.maximum(np.diag(S) - lam**2, UNIQUENESS_FLOOR)
    heywood = False
    history = [_fa_loglik(S, lam, psi, n)]
    converged = False
    for _ in range(max_iter):
        sigma = np.outer(lam, lam) + np.diag(psi)
        beta = np.linalg.solve(sigma, lam)
        s_beta = S @ beta
        ezz = 1.0 - beta @ lam + beta @ s_beta
        lam = s_beta / ezz
        psi = np.diag(S) - lam * s_beta
        if np.any(psi < UNIQUENESS_FLOOR):
            heywood = True
            psi = np.maximum(psi, UNIQUENESS_FLOOR)
        history.append(_fa_loglik(S, lam, psi, n))
        if abs(history[-1] - history[-2]) < tol:
            converged = True
            break
    if heywood:
        warnings.warn(
            "one-factor model hit the uniqueness floor (Heywood case)",
            HeywoodWarning,
            stacklevel=2,
        )
    if lam.sum() < 0:
        lam = -lam
    sol = FactorSolution(mean, lam, psi, history, converged, heywood)
    raw = sol.scores(Y)
    sol.score_mean = float(raw.mean())
    sol.score_sd = float(raw.std())
    return sol


def initial_theta_linear(responses):
    """Standardized regression factor scores from a one-factor ML fit."""
    sol = one_factor_ml(responses)
    theta = sol.scores(responses)
    return TraitEstimates(
        theta=theta,
        provenance="initial",
        bounds_hit=np.zeros(theta.shape[0], dtype=bool),
        info={"factor": sol},
    )


class OneFactorScorer(TransformerMixin, BaseEstimator):
    """One-factor maximum likelihood model producing standardized scores."""

    def __init__(self, tol=1e-6, max_iter=20000):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        self.solution_ = one_factor_ml(X, tol=self.tol, max_iter=self.max_iter)
        self.loadings_ = self.solution_.loadings
        self.uniquenesses_ = self.solution_.uniquenesses
        self.n_features_in_ = self.loadings_.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "solution_")
        return self.solution_.scores(as_matrix(X, "X"))[:, None]


# --- 2PL marginal maximum likelihood ----------------------------------------


@dataclass
class TwoPLCalibration:
    d: np.ndarray
    a: np.ndarray
    loglik_history: list
    converged: bool
    cycles: int


def _quadrature(n_points):
    nodes, weights = hermegauss(n_points)
    return nodes, weights / weights.sum()


def _m_step(r, nq, nodes, d, a, tol=1e-10, max_newton=50):
    """Maximize the expected complete-data loglik for all items at once."""
    for _ in range(max_newton):
        lin = d[:, None] + a[:, None] * nodes[None, :]
        p = expit(lin)
        resid = r - nq[None, :] * p
        g_d = resid.sum(axis=1)
        g_a = (resid * nodes).sum(axis=1)
        w = nq[None, :] * p * (1 - p)
        h_dd = w.sum(axis=1)
        h_da = (w * nodes).sum(axis=1)
        h_aa = (w * nodes**2).sum(axis=1)
        if max(np.max(np.abs(g_d)), np.max(np.abs(g_a))) < tol:
            break
        det = h_dd * h_aa - h_da**2
        step_d = (h_aa * g_d - h_da * g_a) / det
        step_a = (h_dd * g_a - h_da * g_d) / det

        def q_value(dd, aa):
            ll = dd[:, None] + aa[:, None] * nodes[None, :]
            return (r * ll - nq[None, :] * np.logaddexp(0, ll)).sum(axis=1)

        cur = q_value(d, a)
        t = np.ones_like(d)
        for _ in range(30):
            new = q_value(d + t * step_d, a + t * step_a)
            bad = new < cur - 1e-12 * (1 + np.abs(cur))
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
        d = d + t * step_d
        a = a + t * step_a
    return d, a


def calibrate_2pl(responses, n_quad=21, tol=1e-5, max_cycles=500):
    """Bock-Aitkin EM for the 2PL model ``logit P = d + a*theta``, theta ~ N(0, 1)."""
    Y = as_matrix(responses, "responses")
    check_binary_responses(Y)
    n, J = Y.shape
    if J < 3:
        raise DataError("2PL calibration needs at least three items")
    pbar = Y.mean(axis=0)
    if np.any(pbar == 0) or np.any(pbar == 1):
        bad = np.flatnonzero((pbar == 0) | (pbar == 1)).tolist()
        raise DataError(f"items {bad} have a single observed response value")
    nodes, weights = _quadrature(n_quad)
    d = np.log(pbar) - np.log1p(-pbar)
    a = np.ones(J)
    log_w = np.log(weights)
    history = []
    converged = False
    cycles = 0
    for cycles in range(1, max_cycles + 1):
        lin = d[None, :] + a[None, :] * nodes[:, None]  # Q x J
        log_p = -np.logaddexp(0, -lin)
        log_q = -np.logaddexp(0, lin)
        loglik_iq = Y @ log_p.T + (1 - Y) @ log_q.T  # N x Q
        joint = loglik_iq + log_w[None, :]
        mx = joint.max(axis=1, keepdims=True)
        marg = mx[:, 0] + np.log(np.exp(joint - mx).sum(axis=1))
        history.append(float(marg.sum()))
        post = np.exp(joint - marg[:, None])
        nq = post.sum(axis=0)
        r = Y.T @ post  # J x Q
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            converged = True
            break
        d, a = _m_step(r, nq, nodes, d, a)
    return TwoPLCalibration(d=d, a=a, loglik_history=history, converged=converged, cycles=cycles)


def eap_theta(calibration, responses, n_quad=21):
    """Posterior-mean traits under the calibrated 2PL and a standard-normal prior."""
    Y = as_matrix(responses, "responses")
    nodes, weights = _quadrature(n_quad)
    lin = calibration.d[None, :] + calibration.a[None, :] * nodes[:, None]
    joint = Y @ (-np.logaddexp(0, -lin)).T + (1 - Y) @ (-np.logaddexp(0, lin)).T
    joint += np.log(weights)[None, :]
    post = np.exp(joint - joint.max(axis=1, keepdims=True))
    post /= post.sum(axis=1, keepdims=True)
    return post @ nodes


def initial_theta_2pl(responses, n_quad=21, tol=1e-5, max_cycles=500, scoring="ml"):
    """Marginal ML calibration of the 2PL model, then per-respondent traits.

    ``scoring="ml"`` maximizes each respondent's likelihood on ``[-6, 6]``;
    ``"eap"`` returns posterior means, which stay finite for perfect patterns.

    Returns ``(TraitEstimates, TwoPLCalibration)``.
    """
    if scoring not in ("ml", "eap"):
        raise ValueError(f"unknown scoring {scoring!r}")
    Y = as_matrix(responses, "responses")
    cal = calibrate_2pl(Y, n_quad=n_quad, tol=tol, max_cycles=max_cycles)
    if scoring == "eap":
        theta = eap_theta(cal, Y, n_quad=n_quad)
        hit = np.zeros(theta.shape[0], dtype=bool)
    else:
        items = [ItemParams(LinkKind.LOGIT, d=cal.d[j], a0=cal.a[j]) for j in range(Y.shape[1])]
        theta, hit = mle_theta(items, Y)
    est = TraitEstimates(theta, "initial", hit, info={"calibration": cal, "scoring": scoring})
    return est, cal


class TwoPLCalibrator(TransformerMixin, BaseEstimator):
    """2PL marginal ML calibration; ``transform`` returns box-constrained ML traits."""

    def __init__(self, n_quad=21, tol=1e-5, max_cycles=500):
        self.n_quad = n_quad
        self.tol = tol
        self.max_cycles = max_cycles

    def fit(self, X, y=None):
        cal = calibrate_2pl(X, self.n_quad, self.tol, self.max_cycles)
        self.calibration_ = cal
        self.intercepts_ = cal.d
        self.slopes_ = cal.a
        self.loglik_history_ = cal.loglik_history
        self.n_features_in_ = cal.d.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "calibration_")
        items = [
            ItemParams(LinkKind.LOGIT, d=d, a0=a)
            for d, a in zip(self.intercepts_, self.slopes_)
        ]
        theta, _ = mle_theta(items, as_matrix(X, "X"))
        return theta[:, None]


# --- per-respondent maximum likelihood ---------------------------------------


def _theta_derivatives(items, Y, offsets, theta):
    g = np.zeros_like(theta)
    h = np.zeros_like(theta)
    for j, item in enumerate(items):
        a = item.a0
        if a == 0.0:
            continue
        lin = offsets[:, j] + a * theta
        if item.link is LinkKind.IDENTITY:
            g += a * (Y[:, j] - lin) / item.sigma2
            h -= a * a / item.sigma2
        else:
            _, score, w = observation_terms(
                item.link, Y[:, j], np.clip(lin, -LINPRED_CAP, LINPRED_CAP)
            )
            g += a * score
            h -= a * a * w
    return g, h


def mle_theta(items, responses, bounds=THETA_BOUNDS, tol=1e-8, max_iter=200):
    """Box-constrained per-respondent ML trait under fixed item parameters.

    Safeguarded Newton: iterates stay inside a shrinking bracket and fall back
    to bisection whenever the Newton step leaves it. Returns ``(theta, hit)``
    where ``hit`` marks respondents whose maximum lies on the box edge.
    """
    Y = as_matrix(responses, "responses")
    n, J = Y.shape
    if J != len(items):
        raise DataError(f"responses have {J} columns but the bank has {len(items)} items")
    if all(item.a0 == 0.0 for item in items):
        raise NumericalError("likelihood is flat in theta (all slopes are zero)")
    offsets = np.column_stack([item.offset(n) for item in items])
    lo_b, hi_b = float(bounds[0]), float(bounds[1])
    g_lo, _ = _theta_derivatives(items, Y, offsets, np.full(n, lo_b))
    g_hi, _ = _theta_derivatives(items, Y, offsets, np.full(n, hi_b))
    theta = np.zeros(n)
    at_hi = g_hi >= 0
    at_lo = (g_lo <= 0) & ~at_hi
    theta[at_hi] = hi_b
    theta[at_lo] = lo_b
    active = ~(at_hi | at_lo)
    lo = np.full(n, lo_b)
    hi = np.full(n, hi_b)
    theta[active] = np.clip(0.0, lo_b, hi_b)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        g, h = _theta_derivatives(items, Y[idx], offsets[idx], theta[idx])
        t = theta[idx]
        pos = g > 0
        lo[idx] = np.where(pos, t, lo[idx])
        hi[idx] = np.where(pos, hi[idx], t)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = t - g / h
        ok = (h < 0) & (newton > lo[idx]) & (newton < hi[idx])
        new = np.where(ok, newton, 0.5 * (lo[idx] + hi[idx]))
        # an exact stationary point is kept as is
        new = np.where(g == 0, t, new)
        theta[idx] = new
        done = (np.abs(new - t) < tol) | (hi[idx] - lo[idx] < tol)
        active[idx[done]] = False
    return theta, at_hi | at_lo


def calibrate_item(link, responses, theta, eta=None, omega=None, name=None):
    """Item parameters by ML given traits (``lambda = 0``; ``a1 = 0`` without ``eta``)."""
    link = as_link(link)
    fit = fit_glm(link, responses, theta, eta=eta)
    item = ItemParams(
        link=link,
        d=float(fit.d),
        a0=float(fit.a0),
        a1=float(fit.a1) if eta is not None else 0.0,
        sigma2=fit.sigma2,
        eta=eta,
        omega=omega,
        name=name,
    )
    return item, fit


def update_theta(bank, responses, items=None, provenance="dif_corrected"):
    """Per-respondent ML traits over the bank (optionally a subset of items)."""
    Y = as_matrix(responses, "responses")
    if items is not None:
        items = list(items)
        bank = bank.subset(items)
        Y = Y[:, items]
    theta, hit = mle_theta(bank.items, Y)
    return TraitEstimates(theta, provenance, hit)


def benchmark_theta_uncorrected(responses, theta0, link):
    """Traits from items calibrated as if DIF were absent (``a1 = lambda = 0``)."""
    Y = as_matrix(responses, "responses")
    items = [calibrate_item(link, Y[:, j], theta0)[0] for j in range(Y.shape[1])]
    theta, hit = mle_theta(items, Y)
    return TraitEstimates(theta, "benchmark_uncorrected", hit, info={"items": items})


def fisher_information(item, theta=None, eta=None):
    """Target-trait Fisher information of one item.

    Identity link: ``a0**2 / sigma2``. Binary links: the sample mean of the
    per-respondent information at the supplied traits and nuisance scores.
    """
    if item.link is LinkKind.IDENTITY:
        if item.sigma2 <= VARIANCE_FLOOR:
            warnings.warn(
                "residual variance at floor; information is effectively infinite",
                VarianceFloorWarning,
                stacklevel=2,
            )
        return float(item.a0**2 / item.sigma2)
    if theta is None:
        raise ValueError("binary-link information needs trait values")
    theta = np.asarray(theta, dtype=float)
    if eta is None:
        eta = item.eta
    lin = item.d + item.a0 * theta
    if eta is not None and item.a1 != 0.0:
        lin = lin + item.a1 * np.asarray(eta, dtype=float)
    if item.link is LinkKind.LOGIT:
        p = expit(lin)
        per = p * (1 - p)
    else:
        pdf = norm.pdf(lin)
        cdf = norm.cdf(lin)
        per = pdf**2 / np.clip(cdf * (1 - cdf), 1e-300, None)
    return float(np.mean(per) * item.a0**2)
