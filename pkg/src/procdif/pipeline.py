"""Detection, surrogate-based correction and re-scoring over a whole test.

The procedure runs in four steps: initial traits from anchor items, per-item
Wald tests of the group effect, a nuisance surrogate and recalibration for
every flagged item, and a final trait update over all items.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix, as_vector, check_group_columns
from .exceptions import ConfigError, DataError, ProcDifError
from .model_core import ItemDataset, LinkKind, as_link, fit_glm, wald_test
from .surrogate import fit_surrogate, objective_without_nuisance
from .traits import (
    ItemBank,
    TraitEstimates,
    calibrate_item,
    fisher_information,
    initial_theta_2pl,
    initial_theta_linear,
    update_theta,
)

logger = logging.getLogger(__name__)

MIN_ANCHORS = 3


@dataclass
class PipelineConfig:
    """Settings of the detection and correction procedure.

    ``anchor_items=None`` uses every item for the initial traits and tests
    every item, which is the mode used when no DIF-free set is known.
    ``group_columns=None`` uses every grouping column.
    """

    link: str = "identity"
    anchor_items: tuple = None
    group_columns: tuple = None
    nonuniform: bool = False
    alpha_level: float = 0.05
    restarts: int = 8
    seed: int = 0
    initial_scoring: str = "ml"

    def __post_init__(self):
        try:
            self.link = as_link(self.link)
        except ValueError as exc:
            raise ConfigError(str(exc), "link") from None
        if self.anchor_items is not None:
            self.anchor_items = tuple(sorted({int(a) for a in self.anchor_items}))
            if len(self.anchor_items) < MIN_ANCHORS:
                raise ConfigError(f"at least {MIN_ANCHORS} anchor items are required", "anchor_items")
        if self.group_columns is not None:
            self.group_columns = tuple(int(g) for g in self.group_columns)
            if not self.group_columns:
                raise ConfigError("select at least one grouping column", "group_columns")
        if not isinstance(self.nonuniform, bool):
            raise ConfigError("must be a boolean", "nonuniform")
        if not (0.0 < float(self.alpha_level) < 1.0):
            raise ConfigError("must lie strictly between 0 and 1", "alpha_level")
        if isinstance(self.restarts, bool) or int(self.restarts) != self.restarts or self.restarts < 0:
            raise ConfigError("must be a nonnegative integer", "restarts")
        if isinstance(self.seed, bool) or int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("must be a nonnegative integer", "seed")
        if self.initial_scoring not in ("ml", "eap"):
            raise ConfigError("must be 'ml' or 'eap'", "initial_scoring")

    def to_dict(self):
        return {
            "link": self.link.value,
            "anchor_items": None if self.anchor_items is None else list(self.anchor_items),
            "group_columns": None if self.group_columns is None else list(self.group_columns),
            "nonuniform": self.nonuniform,
            "alpha_level": float(self.alpha_level),
            "restarts": int(self.restarts),
            "seed": int(self.seed),
            "initial_scoring": self.initial_scoring,
        }


@dataclass
class AssessmentData:
    """Responses, per-item process features and grouping covariates of one test.

    ``features`` maps an item index to its ``N x K_j`` matrix; items without
    process data are simply absent.
    """

    responses: np.ndarray
    groups: np.ndarray
    features: dict = field(default_factory=dict)
    item_names: list = None
    group_names: list = None
    respondent_ids: list = None

    def __post_init__(self):
        self.responses = as_matrix(self.responses, "responses")
        n, J = self.responses.shape
        self.groups = check_group_columns(as_matrix(self.groups, "groups", n=n, min_cols=1))
        feats = {}
        for j, X in dict(self.features).items():
            j = int(j)
            if not 0 <= j < J:
                raise DataError(f"features supplied for unknown item {j}")
            feats[j] = as_matrix(X, f"features of item {j}", n=n, min_cols=1)
        self.features = feats
        if self.item_names is None:
            self.item_names = [f"item{j}" for j in range(J)]
        if len(self.item_names) != J:
            raise DataError("item_names length differs from the number of items")
        if self.group_names is None:
            self.group_names = [f"group{m}" for m in range(self.groups.shape[1])]
        if len(self.group_names) != self.groups.shape[1]:
            raise DataError("group_names length differs from the number of grouping columns")
        if self.respondent_ids is None:
            self.respondent_ids = list(range(n))
        if len(self.respondent_ids) != n:
            raise DataError("respondent_ids length differs from the number of respondents")

    @property
    def n(self):
        return self.responses.shape[0]

    @property
    def j(self):
        return self.responses.shape[1]


def _selected_groups(data, config):
    cols = config.group_columns
    if cols is None:
        return list(range(data.groups.shape[1]))
    bad = [c for c in cols if not 0 <= c < data.groups.shape[1]]
    if bad:
        raise ConfigError(f"unknown grouping columns {bad}", "group_columns")
    return list(cols)


def _anchors(data, config):
    if config.anchor_items is None:
        return list(range(data.j))
    bad = [a for a in config.anchor_items if not 0 <= a < data.j]
    if bad:
        raise ConfigError(f"unknown anchor items {bad}", "anchor_items")
    return list(config.anchor_items)


def initial_traits(data, config):
    """Initial traits from the anchor items under the configured link.

    The probit link reuses the logistic calibration: both give the same trait
    ordering and the standard-normal scale is fixed by the prior.
    """
    anchors = _anchors(data, config)
    Y = data.responses[:, anchors]
    if config.link is LinkKind.IDENTITY:
        return initial_theta_linear(Y)
    return initial_theta_2pl(Y, scoring=config.initial_scoring)[0]


@dataclass
class DetectionRow:
    item: int
    item_name: str
    group: int
    group_name: str
    term: str
    estimate: float
    se: float
    z: float
    p_value: float
    significant: bool


@dataclass
class DetectionReport:
    rows: list
    dif_items: list
    tested_items: list
    anchor_items: list
    theta0: TraitEstimates
    alpha_level: float
    failures: dict = field(default_factory=dict)

    def significant_items(self):
        return sorted({r.item for r in self.rows if r.significant})


def run_detection(data, config):
    """Wald tests of the group effect, one grouping variable at a time.

    Anchors are not tested unless they cover every item. With
    ``config.nonuniform`` the trait-by-group interaction is tested as well and
    either term flags the item.
    """
    anchors = _anchors(data, config)
    tested = list(range(data.j)) if len(anchors) == data.j else [
        j for j in range(data.j) if j not in set(anchors)
    ]
    group_idx = _selected_groups(data, config)
    theta0 = initial_traits(data, config)
    th = theta0.theta
    rows, failures = [], {}
    for j in tested:
        y = data.responses[:, j]
        for m in group_idx:
            z = data.groups[:, m]
            cov = np.column_stack([z, z * th]) if config.nonuniform else z[:, None]
            terms = ["lambda", "interaction"] if config.nonuniform else ["lambda"]
            try:
                fit = fit_glm(config.link, y, th, groups=cov)
            except ProcDifError as exc:
                failures[(j, m)] = str(exc)
                logger.warning("detection fit failed for item %d, group %d: %s", j, m, exc)
                continue
            for t, term in enumerate(terms):
                w = wald_test(fit, f"lambda{t}")
                rows.append(
                    DetectionRow(
                        item=j,
                        item_name=data.item_names[j],
                        group=m,
                        group_name=data.group_names[m],
                        term=term,
                        estimate=w.estimate,
                        se=w.se,
                        z=w.z,
                        p_value=w.p_value,
                        significant=bool(w.p_value < config.alpha_level),
                    )
                )
    dif = sorted({r.item for r in rows if r.significant})
    return DetectionReport(
        rows=rows,
        dif_items=dif,
        tested_items=tested,
        anchor_items=anchors,
        theta0=theta0,
        alpha_level=float(config.alpha_level),
        failures=failures,
    )


@dataclass
class ItemCorrection:
    item: int
    item_name: str
    status: str
    method: str = None
    omega: np.ndarray = None
    eta: np.ndarray = None
    fit: object = None
    surrogate: object = None
    objective_before: float = float("nan")
    objective_after: float = float("nan")
    fi_before: float = float("nan")
    fi_after: float = float("nan")
    message: str = ""


@dataclass
class CorrectionReport:
    items: list
    bank: ItemBank
    theta: TraitEstimates
    theta0: TraitEstimates

    @property
    def corrected(self):
        return [c for c in self.items if c.status == "corrected"]


def run_correction(data, detection, config):
    """Surrogates and recalibration for the flagged items, then re-scoring.

    Clean items keep their calibration against the initial traits. A flagged
    item whose surrogate cannot be built is reported uncorrected and enters
    the final scoring without a nuisance term.
    """
    theta0 = detection.theta0
    th = theta0.theta
    group_idx = _selected_groups(data, config)
    Z = data.groups[:, group_idx]
    flagged = set(detection.dif_items)
    items, reports = [], []
    dif_positions = []
    for j in range(data.j):
        y = data.responses[:, j]
        plain, _ = calibrate_item(config.link, y, th, name=data.item_names[j])
        if j not in flagged:
            items.append(plain)
            continue
        rec = ItemCorrection(item=j, item_name=data.item_names[j], status="failed")
        rec.fi_before = fisher_information(plain, th)
        try:
            if j not in data.features:
                raise DataError("no process features supplied for this item")
            ds = ItemDataset(y, data.features[j], Z, th)
            rec.objective_before = objective_without_nuisance(ds, config.link, config.nonuniform)
            result = fit_surrogate(
                ds,
                config.link,
                nonuniform=config.nonuniform,
                restarts=config.restarts,
                random_state=np.random.default_rng(
                    np.random.SeedSequence(config.seed, spawn_key=(j,))
                ),
            )
            item, fit = calibrate_item(
                config.link, y, th, eta=result.eta, omega=result.omega, name=data.item_names[j]
            )
        except ProcDifError as exc:
            rec.message = str(exc)
            logger.warning("item %s left uncorrected: %s", data.item_names[j], exc)
            items.append(plain)
            reports.append(rec)
            continue
        rec.status = "corrected"
        rec.method = result.method
        rec.omega = result.omega
        rec.eta = result.eta
        rec.fit = fit
        rec.surrogate = result
        rec.objective_after = result.objective_value
        rec.fi_after = fisher_information(item, th)
        dif_positions.append(j)
        items.append(item)
        reports.append(rec)
    bank = ItemBank(items, frozenset(dif_positions))
    theta = update_theta(bank, data.responses)
    return CorrectionReport(items=reports, bank=bank, theta=theta, theta0=theta0)


def residual_nuisance(eta_hat, theta):
    """``eta_hat`` minus its least-squares projection on ``(1, theta)``."""
    eta_hat = as_vector(eta_hat, "eta_hat")
    theta = as_vector(theta, "theta", n=eta_hat.shape[0])
    X = np.column_stack([np.ones_like(theta), theta])
    coef, *_ = np.linalg.lstsq(X, eta_hat, rcond=None)
    return eta_hat - X @ coef


class DIFCorrector(TransformerMixin, BaseEstimator):
    """Estimator wrapper around detection, correction and corrected scoring.

    ``fit`` takes the ``N x J`` response matrix plus ``features`` (item index to
    feature matrix) and ``groups``; ``transform`` scores responses with the
    corrected bank, building each flagged item's nuisance scores from the
    supplied features.
    """

    def __init__(
        self,
        link="identity",
        anchor_items=None,
        group_columns=None,
        nonuniform=False,
        alpha_level=0.05,
        restarts=8,
        seed=0,
        initial_scoring="ml",
    ):
        self.link = link
        self.anchor_items = anchor_items
        self.group_columns = group_columns
        self.nonuniform = nonuniform
        self.alpha_level = alpha_level
        self.restarts = restarts
        self.seed = seed
        self.initial_scoring = initial_scoring

    def _config(self):
        return PipelineConfig(**self.get_params())

    def fit(self, X, y=None, features=None, groups=None):
        if groups is None:
            raise DataError("grouping covariates are required")
        config = self._config()
        data = AssessmentData(X, groups, features or {})
        self.detection_ = run_detection(data, config)
        self.correction_ = run_correction(data, self.detection_, config)
        self.dif_items_ = list(self.detection_.dif_items)
        self.theta_ = self.correction_.theta.theta
        self.n_features_in_ = data.j
        return self

    def transform(self, X, features=None):
        check_is_fitted(self, "correction_")
        Y = as_matrix(X, "responses")
        if Y.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} items, got {Y.shape[1]}")
        bank = self.correction_.bank
        items = list(bank.items)
        for j in bank.dif_set:
            if features is None or j not in features:
                raise DataError(f"features for corrected item {j} are required")
            Xj = as_matrix(features[j], f"features of item {j}", n=Y.shape[0])
            eta = Xj @ items[j].omega
            items[j] = items[j].with_eta(eta)
        est = update_theta(ItemBank(items, bank.dif_set), Y)
        return est.theta[:, None]

    def fit_transform(self, X, y=None, features=None, groups=None):
        self.fit(X, y, features=features, groups=groups)
        return self.theta_[:, None]
