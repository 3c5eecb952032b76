"""Monte-Carlo simulation of DIF driven by a process-feature nuisance trait.

Each replication draws traits, item parameters and per-item process features,
generates responses with the grouping effect entering only through the
nuisance trait, runs the correction on the known DIF items and records the
evaluation criteria: objective values, nuisance-score correlation, item
parameter errors, Fisher information and the between-group sum of squared
trait bias.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import linalg

from .exceptions import ConfigError, DataError, ProcDifError
from .model_core import ItemDataset, LinkKind, fit_glm
from .surrogate import fit_surrogate, objective_without_nuisance
from .traits import (
    ItemBank,
    ItemParams,
    benchmark_theta_uncorrected,
    calibrate_item,
    fisher_information,
    initial_theta_2pl,
    initial_theta_linear,
    update_theta,
)

logger = logging.getLogger(__name__)

DIF_EFFECTS = {"small": (0.5, 1.0), "large": (1.0, 1.5)}
FOCAL_FRACTION = 1.0 / 3.0
COPY_NOISE_VAR = 0.1


@dataclass
class SimConfig:
    n: int = 500
    j_clean: int = 20
    j_dif: int = 5
    dif_effect: str = "large"
    link: str = "identity"
    nonuniform: bool = False
    k: int = 10
    replications: int = 100
    seed: int = 0
    restarts: int = 8
    initial_scoring: str = "ml"

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need_int(name, lo):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, (int, np.integer)):
                raise ConfigError(f"must be an integer, got {val!r}", name)
            if val < lo:
                raise ConfigError(f"must be >= {lo}, got {val}", name)

        need_int("n", 4)
        need_int("j_clean", 3)
        need_int("j_dif", 1)
        need_int("k", 1)
        need_int("replications", 1)
        need_int("seed", 0)
        need_int("restarts", 0)
        if self.dif_effect not in DIF_EFFECTS:
            raise ConfigError(f"must be one of {sorted(DIF_EFFECTS)}", "dif_effect")
        if self.link not in ("identity", "logit"):
            raise ConfigError("must be 'identity' or 'logit'", "link")
        if self.initial_scoring not in ("ml", "eap"):
            raise ConfigError("must be 'ml' or 'eap'", "initial_scoring")
        if not isinstance(self.nonuniform, bool):
            raise ConfigError("must be a boolean", "nonuniform")
        k_eff = self.k + (1 if self.link == "identity" else 0)
        if self.n <= k_eff:
            raise ConfigError(
                "sample covariance of the features is singular (n <= k)", "n"
            )

    @property
    def j_total(self):
        return self.j_clean + self.j_dif

    @property
    def a1_range(self):
        return DIF_EFFECTS[self.dif_effect]

    @property
    def dif_items(self):
        return list(range(self.j_dif))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"unknown simulation setting(s) {unknown}", unknown[0])
        return cls(**payload)


@dataclass
class SimTruth:
    theta: np.ndarray
    groups: np.ndarray
    d: np.ndarray
    a0: np.ndarray
    a1: np.ndarray
    dif_items: list
    omega: dict
    eta: dict
    gamma: dict = field(default_factory=dict)


@dataclass
class SimData:
    responses: np.ndarray
    features: dict
    groups: np.ndarray

    def item_dataset(self, j, theta):
        return ItemDataset(self.responses[:, j], self.features[j], self.groups, theta)


def inverse_sqrt_cov(X):
    """Symmetric inverse square root of the sample covariance of ``X``."""
    cov = np.cov(X, rowvar=False)
    evals, evecs = linalg.eigh(np.atleast_2d(cov))
    if evals.min() <= 1e-12 * max(evals.max(), 1e-300):
        raise DataError("sample covariance of the features is singular")
    return (evecs / np.sqrt(evals)) @ evecs.T


def _rng(config, rep, stream):
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(rep, stream)))


def generate_replication(config, rep):
    """Draw one synthetic data set.

    Random streams are keyed by ``(seed, rep, stream)`` so replications can run
    in any order or in parallel with identical results.

    Returns ``(SimData, SimTruth)``.
    """
    n, J, K = config.n, config.j_total, config.k
    rng = _rng(config, rep, 0)
    n_focal = int(round(n * FOCAL_FRACTION))
    z = np.zeros(n)
    z[rng.permutation(n)[:n_focal]] = 1.0
    theta = rng.standard_normal(n)
    d = rng.uniform(-1.0, 1.0, J)
    a0 = rng.uniform(1.0, 2.0, J)
    a1 = np.zeros(J)
    lo, hi = config.a1_range
    dif = config.dif_items
    a1[dif] = rng.uniform(lo, hi, len(dif))

    link = LinkKind(config.link)
    responses = np.empty((n, J))
    features, omegas, etas, gammas = {}, {}, {}, {}
    for j in range(J):
        irng = _rng(config, rep, 1 + j)
        lin = d[j] + a0[j] * theta
        if j in dif:
            mean = np.where(z[:, None] == 1.0, -1.0, 1.0) * np.ones((1, K))
            if config.nonuniform:
                gammas[j] = float(irng.exponential(1.0))
                mean = mean + (gammas[j] * theta * z)[:, None]
            X = mean + irng.standard_normal((n, K))
            X = X @ inverse_sqrt_cov(X)
            omega = irng.exponential(1.0, K)
            omega /= np.linalg.norm(omega)
            eta = X @ omega
            lin = lin + a1[j] * eta
            features[j], omegas[j], etas[j] = X, omega, eta
        if link is LinkKind.IDENTITY:
            responses[:, j] = lin + irng.standard_normal(n)
        else:
            responses[:, j] = (irng.random(n) < 1.0 / (1.0 + np.exp(-lin))).astype(float)
        if j in dif and link is LinkKind.IDENTITY:
            copy = responses[:, j] + irng.normal(0.0, np.sqrt(COPY_NOISE_VAR), n)
            aug = np.column_stack([features[j], copy])
            aug -= aug.mean(axis=0)
            features[j] = aug @ inverse_sqrt_cov(aug)

    data = SimData(responses=responses, features=features, groups=z[:, None])
    truth = SimTruth(
        theta=theta,
        groups=z,
        d=d,
        a0=a0,
        a1=a1,
        dif_items=list(dif),
        omega=omegas,
        eta=etas,
        gamma=gammas,
    )
    return data, truth


# --- evaluation criteria ----------------------------------------------------


def mse_items(estimates, truth):
    """Mean squared errors of ``(d, a0, a1)``.

    Both arguments map ``"d"``, ``"a0"``, ``"a1"`` to equally shaped arrays
    (items, or replications x items).
    """
    out = []
    for key in ("d", "a0", "a1"):
        e = np.asarray(estimates[key], dtype=float)
        t = np.asarray(truth[key], dtype=float)
        if e.shape != t.shape:
            raise DataError(f"shape mismatch for {key}: {e.shape} vs {t.shape}")
        out.append(float(np.mean((e - t) ** 2)))
    return tuple(out)


def signed_corr(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DataError("correlation inputs differ in length")
    if np.std(a) == 0 or np.std(b) == 0:
        raise DataError("correlation undefined for zero-variance input")
    return float(np.corrcoef(a, b)[0, 1])


def corr_eta(eta_hat, eta_true):
    """Absolute sample correlation; the surrogate's sign is not identified."""
    return abs(signed_corr(eta_hat, eta_true))


def ssb(theta_est, theta_true, groups):
    """Between-group sum of squares of the trait bias ``theta_est - theta_true``."""
    nu = np.asarray(theta_est, dtype=float) - np.asarray(theta_true, dtype=float)
    groups = np.asarray(groups).ravel()
    if nu.shape != groups.shape:
        raise DataError("groups and trait vectors differ in length")
    labels = np.unique(groups)
    if labels.size < 2:
        raise DataError("between-group sum of squares needs at least two groups")
    grand = nu.mean()
    return float(sum(np.sum(groups == g) * (nu[groups == g].mean() - grand) ** 2 for g in labels))


# --- replication records ------------------------------------------------------


@dataclass
class ItemEstimate:
    item: int
    method: str
    d: float
    a0: float
    a1: float
    omega: np.ndarray
    eta_hat: np.ndarray
    objective_before: float
    objective_after: float
    fi_before: float
    fi_after: float


@dataclass
class ReplicationRecord:
    """Everything needed to recompute a replication's evaluation criteria."""

    rep: int
    theta: np.ndarray
    groups: np.ndarray
    true_d: np.ndarray
    true_a0: np.ndarray
    true_a1: np.ndarray
    true_eta: list
    estimates: list
    theta_benchmark: np.ndarray
    theta_corrected: np.ndarray


@dataclass
class ReplicationMetrics:
    mse_d: float
    mse_a0: float
    mse_a1: float
    corr_eta: float
    ssb_uncorrected: float
    ssb_corrected: float
    objective_before: list
    objective_after: list
    fi_before: list
    fi_after: list


def replication_metrics(record):
    """Evaluation criteria of one replication.

    ``a1`` estimates are sign-aligned with the truth through the sign of the
    nuisance correlation, since ``(omega, a1)`` and ``(-omega, -a1)`` fit
    identically.
    """
    signs = np.array(
        [np.sign(signed_corr(e.eta_hat, t)) or 1.0 for e, t in zip(record.estimates, record.true_eta)]
    )
    est = {
        "d": [e.d for e in record.estimates],
        "a0": [e.a0 for e in record.estimates],
        "a1": signs * np.array([e.a1 for e in record.estimates]),
    }
    tru = {"d": record.true_d, "a0": record.true_a0, "a1": record.true_a1}
    mse_d, mse_a0, mse_a1 = mse_items(est, tru)
    corr = float(np.mean([corr_eta(e.eta_hat, t) for e, t in zip(record.estimates, record.true_eta)]))
    return ReplicationMetrics(
        mse_d=mse_d,
        mse_a0=mse_a0,
        mse_a1=mse_a1,
        corr_eta=corr,
        ssb_uncorrected=ssb(record.theta_benchmark, record.theta, record.groups),
        ssb_corrected=ssb(record.theta_corrected, record.theta, record.groups),
        objective_before=[e.objective_before for e in record.estimates],
        objective_after=[e.objective_after for e in record.estimates],
        fi_before=[e.fi_before for e in record.estimates],
        fi_after=[e.fi_after for e in record.estimates],
    )


def run_replication(config, rep):
    """Generate, correct the known DIF items and collect a :class:`ReplicationRecord`."""
    data, truth = generate_replication(config, rep)
    link = LinkKind(config.link)
    dif = truth.dif_items
    clean = [j for j in range(config.j_total) if j not in dif]
    Y = data.responses
    if link is LinkKind.IDENTITY:
        theta0 = initial_theta_linear(Y[:, clean]).theta
    else:
        theta0 = initial_theta_2pl(Y[:, clean], scoring=config.initial_scoring)[0].theta

    estimates = []
    dif_items = []
    for j in dif:
        ds = data.item_dataset(j, theta0)
        before = objective_without_nuisance(ds, link, config.nonuniform)
        result = fit_surrogate(
            ds,
            link,
            nonuniform=config.nonuniform,
            restarts=config.restarts,
            random_state=np.random.default_rng(
                np.random.SeedSequence(config.seed, spawn_key=(rep, 1000 + j))
            ),
        )
        eta_hat = result.eta
        item, _ = calibrate_item(link, ds.responses, theta0, eta=eta_hat, omega=result.omega)
        plain, _ = calibrate_item(link, ds.responses, theta0)
        fi_before = fisher_information(plain, theta0)
        fi_after = fisher_information(item, theta0)
        dif_items.append(item)
        estimates.append(
            ItemEstimate(
                item=j,
                method=result.method,
                d=item.d,
                a0=item.a0,
                a1=item.a1,
                omega=result.omega,
                eta_hat=eta_hat,
                objective_before=before,
                objective_after=result.objective_value,
                fi_before=fi_before,
                fi_after=fi_after,
            )
        )

    Y_dif = Y[:, dif]
    bench = benchmark_theta_uncorrected(Y_dif, theta0, link)
    bank = ItemBank(dif_items, frozenset(range(len(dif))))
    corrected = update_theta(bank, Y_dif)
    return ReplicationRecord(
        rep=rep,
        theta=truth.theta,
        groups=truth.groups,
        true_d=truth.d[dif],
        true_a0=truth.a0[dif],
        true_a1=truth.a1[dif],
        true_eta=[truth.eta[j] for j in dif],
        estimates=estimates,
        theta_benchmark=bench.theta,
        theta_corrected=corrected.theta,
    )


# --- aggregation ----------------------------------------------------------------


@dataclass
class EvalReport:
    """Monte-Carlo summary of one simulation setting."""

    config: dict
    replications: int
    failures: int
    failure_messages: list
    mse_d: float
    mse_a0: float
    mse_a1: float
    corr_eta: float
    fi_before: list
    fi_after: list
    ssb_uncorrected: list
    ssb_corrected: list
    objective_before: list
    objective_after: list

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, payload):
        return cls(**{f.name: payload[f.name] for f in fields(cls)})


def aggregate(config, metrics, failures=()):
    """Average per-replication metrics; distributions are kept in replication order."""
    failures = list(failures)
    if not metrics:
        nan = float("nan")
        mse_d = mse_a0 = mse_a1 = corr = nan
    else:
        mse_d = float(np.mean([m.mse_d for m in metrics]))
        mse_a0 = float(np.mean([m.mse_a0 for m in metrics]))
        mse_a1 = float(np.mean([m.mse_a1 for m in metrics]))
        corr = float(np.mean([m.corr_eta for m in metrics]))
    cfg = config.to_dict() if isinstance(config, SimConfig) else dict(config)
    return EvalReport(
        config=cfg,
        replications=len(metrics),
        failures=len(failures),
        failure_messages=[str(f) for f in failures],
        mse_d=mse_d,
        mse_a0=mse_a0,
        mse_a1=mse_a1,
        corr_eta=corr,
        fi_before=[x for m in metrics for x in m.fi_before],
        fi_after=[x for m in metrics for x in m.fi_after],
        ssb_uncorrected=[m.ssb_uncorrected for m in metrics],
        ssb_corrected=[m.ssb_corrected for m in metrics],
        objective_before=[x for m in metrics for x in m.objective_before],
        objective_after=[x for m in metrics for x in m.objective_after],
    )


def _safe_replication(args):
    config, rep = args
    try:
        return rep, run_replication(config, rep), None
    except (ProcDifError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("replication %d failed: %s", rep, exc)
        return rep, None, f"replication {rep}: {type(exc).__name__}: {exc}"


def run_study(config, threads=1, return_records=False):
    """Run all replications of one setting and aggregate them.

    Failed replications are excluded and counted in the report.
    """
    jobs = [(config, rep) for rep in range(config.replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_safe_replication, jobs))
    else:
        outcomes = [_safe_replication(job) for job in jobs]
    outcomes.sort(key=lambda o: o[0])
    records = [rec for _, rec, err in outcomes if rec is not None]
    failures = [err for _, rec, err in outcomes if err is not None]
    report = aggregate(config, [replication_metrics(r) for r in records], failures)
    if return_records:
        return report, records
    return report
