"""Command-line interface: ``procdif {simulate,detect,correct,score,eval}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

import argparse
import glob
import itertools
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import io as fio
from .exceptions import ConfigError, DataError, NumericalError, ProcDifError
from .model_core import LinkKind
from .pipeline import (
    AssessmentData,
    DetectionReport,
    PipelineConfig,
    initial_traits,
    run_correction,
    run_detection,
)
from .simulation import (
    ItemEstimate,
    ReplicationRecord,
    SimConfig,
    aggregate,
    replication_metrics,
    run_study,
)
from .traits import (
    ItemBank,
    ItemParams,
    benchmark_theta_uncorrected,
    update_theta,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
THREADS_ENV = "PROCDIF_THREADS"
TABLE_METRICS = ("mse_d", "mse_a0", "mse_a1", "corr_eta")
DEFAULT_GRID = {"n": [200, 500, 1000], "j_dif": [5, 10, 15], "dif_effect": ["small", "large"]}

logger = logging.getLogger("procdif")


class ArgumentError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ArgumentError(message, "arguments")


def _default_threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        val = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}", THREADS_ENV) from None
    if val < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1", THREADS_ENV)
    return val


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON configuration document")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--threads", type=int, help=f"worker processes (default: ${THREADS_ENV} or 1)")
    common.add_argument("--link", choices=[k.value for k in LinkKind])
    common.add_argument("--alpha", type=float, help="significance level for detection")
    common.add_argument("--anchors", help="comma-separated anchor item names or indices")
    common.add_argument("--nonuniform", action="store_true", default=None, help="model non-uniform DIF")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="procdif", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="run a Monte-Carlo study")
    p.add_argument("--dump", action="store_true", default=None, help="write per-replication truth and estimates")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("detect", parents=[common], help="test every item for DIF")
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("correct", parents=[common], help="build surrogates for flagged items and re-score")
    p.add_argument("--detection", type=Path, help="detection.json from a previous detect run")
    p.set_defaults(handler=cmd_correct)

    p = sub.add_parser("score", parents=[common], help="trait estimates from a calibrated bank")
    p.add_argument("--bank", type=Path, help="bank.json written by correct")
    p.add_argument(
        "--provenance",
        choices=["initial", "dif_corrected", "benchmark_uncorrected"],
        default="dif_corrected",
    )
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="evaluation criteria from truth and estimates")
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--estimates", type=Path, required=True)
    p.set_defaults(handler=cmd_eval)
    return parser


def _require_out(args):
    if args.out is None:
        raise ConfigError("--out is required", "out")
    return args.out


def _threads(args):
    threads = args.threads if args.threads is not None else _default_threads()
    if threads < 1:
        raise ConfigError("must be >= 1", "threads")
    return threads


# --- simulate -------------------------------------------------------------------


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


def setting_key(cfg):
    shape = "nonuniform" if cfg.nonuniform else "uniform"
    return f"{cfg.link}_{shape}_N{cfg.n}_{cfg.dif_effect}_J{cfg.j_dif}"


def simulation_grid(raw, args):
    raw = dict(raw)
    raw.pop("dump", None)
    if args.link is not None:
        raw["link"] = args.link
    if args.nonuniform:
        raw["nonuniform"] = True
    if args.seed is not None:
        raw["seed"] = args.seed
    axes = {k: _as_list(raw.pop(k, DEFAULT_GRID[k])) for k in DEFAULT_GRID}
    for key, vals in axes.items():
        if not vals:
            raise ConfigError("needs at least one value", key)
    configs = []
    for effect, j_dif, n in itertools.product(axes["dif_effect"], axes["j_dif"], axes["n"]):
        try:
            configs.append(SimConfig.from_dict(dict(raw, n=n, j_dif=j_dif, dif_effect=effect)))
        except TypeError as exc:
            raise ConfigError(str(exc), "config") from None
    return configs, axes


def results_table(configs, reports):
    """Metric x N rows by (effect, J1) columns, the layout of the reference tables."""
    by_key = {setting_key(c): r for c, r in zip(configs, reports)}
    ns = sorted({c.n for c in configs})
    cols = []
    for c in configs:
        col = (c.dif_effect, c.j_dif)
        if col not in cols:
            cols.append(col)
    rows = []
    base = configs[0]
    for metric in TABLE_METRICS:
        for n in ns:
            row = {"metric": metric, "N": n}
            for effect, j_dif in cols:
                key = setting_key(
                    SimConfig.from_dict(dict(base.to_dict(), n=n, dif_effect=effect, j_dif=j_dif))
                )
                rep = by_key.get(key)
                row[f"{effect}_J{j_dif}"] = getattr(rep, metric) if rep is not None else np.nan
            rows.append(row)
    return pd.DataFrame(rows)


def _figure_frames(configs, reports, records_by_key):
    obj, ssb, fi = [], [], []
    for cfg, rep in zip(configs, reports):
        key = setting_key(cfg)
        for rec in records_by_key[key]:
            m = replication_metrics(rec)
            ssb.append({"setting": key, "rep": rec.rep, "uncorrected": m.ssb_uncorrected, "corrected": m.ssb_corrected})
            for e in rec.estimates:
                obj.append({"setting": key, "rep": rec.rep, "item": e.item, "before": e.objective_before, "after": e.objective_after})
                fi.append({"setting": key, "rep": rec.rep, "item": e.item, "before": e.fi_before, "after": e.fi_after})
    cols = {"obj": ["setting", "rep", "item", "before", "after"], "ssb": ["setting", "rep", "uncorrected", "corrected"]}
    return (
        pd.DataFrame(obj, columns=cols["obj"]),
        pd.DataFrame(ssb, columns=cols["ssb"]),
        pd.DataFrame(fi, columns=cols["obj"]),
    )


def dump_records(directory, config, records, failures, manifest):
    """Per-replication truth and estimates in the layout read by ``eval``."""
    truth_dir, est_dir = Path(directory) / "truth", Path(directory) / "estimates"
    meta = {"config": config.to_dict(), "failures": list(failures), "replications": [r.rep for r in records]}
    fio.write_json(truth_dir / "meta.json", meta, manifest)
    fio.write_json(est_dir / "meta.json", meta, manifest)
    for rec in records:
        tag = f"rep{rec.rep:04d}"
        ids = [str(i) for i in range(rec.theta.shape[0])]
        fio.write_matrix(truth_dir / f"{tag}_persons.csv", ids, np.column_stack([rec.theta, rec.groups]), ["theta", "group"], manifest)
        items = [str(e.item) for e in rec.estimates]
        fio.write_matrix(
            truth_dir / f"{tag}_items.csv",
            items,
            np.column_stack([rec.true_d, rec.true_a0, rec.true_a1]),
            ["d", "a0", "a1"],
            manifest,
            id_name="item",
        )
        fio.write_matrix(truth_dir / f"{tag}_eta.csv", ids, np.column_stack(rec.true_eta), [f"item{i}" for i in items], manifest)
        frame = pd.DataFrame(
            {
                "item": items,
                "method": [e.method for e in rec.estimates],
                "d": [e.d for e in rec.estimates],
                "a0": [e.a0 for e in rec.estimates],
                "a1": [e.a1 for e in rec.estimates],
                "objective_before": [e.objective_before for e in rec.estimates],
                "objective_after": [e.objective_after for e in rec.estimates],
                "fi_before": [e.fi_before for e in rec.estimates],
                "fi_after": [e.fi_after for e in rec.estimates],
            }
        )
        fio.write_frame(est_dir / f"{tag}_items.csv", frame, manifest)
        fio.write_matrix(est_dir / f"{tag}_eta.csv", ids, np.column_stack([e.eta_hat for e in rec.estimates]), [f"item{i}" for i in items], manifest)
        fio.write_matrix(
            est_dir / f"{tag}_theta.csv",
            ids,
            np.column_stack([rec.theta_benchmark, rec.theta_corrected]),
            ["benchmark", "corrected"],
            manifest,
        )


def cmd_simulate(args):
    out = _require_out(args)
    raw = fio.read_config(args.config) if args.config else {}
    dump = bool(args.dump) or bool(raw.get("dump", False))
    configs, axes = simulation_grid(raw, args)
    threads = _threads(args)
    manifest = fio.build_manifest(
        "simulate",
        {"settings": [c.to_dict() for c in configs], "dump": dump},
        inputs=[args.config] if args.config else [],
        seed=configs[0].seed,
    )
    reports, records_by_key, summary = [], {}, []
    for cfg in configs:
        key = setting_key(cfg)
        logger.info("running %s (%d replications)", key, cfg.replications)
        report, records = run_study(cfg, threads=threads, return_records=True)
        reports.append(report)
        records_by_key[key] = records
        summary.append(dict(report.to_dict(), setting=key))
        if dump:
            dump_records(out / "dump" / key, cfg, records, report.failure_messages, manifest)
    fio.write_json(out / "report.json", {"settings": summary}, manifest)
    fio.write_frame(out / "table.csv", results_table(configs, reports), manifest)
    obj, ssb, fi = _figure_frames(configs, reports, records_by_key)
    fio.write_frame(out / "figure_objective.csv", obj, manifest)
    fio.write_frame(out / "figure_ssb.csv", ssb, manifest)
    fio.write_frame(out / "figure_fisher_information.csv", fi, manifest)
    fio.write_json(out / "manifest.json", manifest)
    failed = sum(r.failures for r in reports)
    print(f"{len(configs)} setting(s) written to {out}; {failed} failed replication(s)")
    return EXIT_OK


# --- eval -----------------------------------------------------------------------


def _rep_tags(directory):
    tags = sorted(Path(p).name[: -len("_items.csv")] for p in glob.glob(str(Path(directory) / "rep*_items.csv")))
    if not tags:
        raise DataError(f"{directory}: no rep*_items.csv files")
    return tags


def load_records(truth_dir, est_dir):
    """Rebuild replication records from a truth and an estimates directory."""
    truth_tags, est_tags = _rep_tags(truth_dir), _rep_tags(est_dir)
    if truth_tags != est_tags:
        raise DataError(f"replications differ between truth ({len(truth_tags)}) and estimates ({len(est_tags)})")
    records = []
    for tag in truth_tags:
        ids, persons, pcols = fio.read_matrix(truth_dir / f"{tag}_persons.csv")
        if pcols[:2] != ["theta", "group"]:
            raise DataError(f"{tag}_persons.csv must have columns theta, group")
        t_items = fio.read_frame(truth_dir / f"{tag}_items.csv")
        e_items = fio.read_frame(est_dir / f"{tag}_items.csv")
        if t_items.shape[0] != e_items.shape[0]:
            raise DataError(f"{tag}: truth lists {t_items.shape[0]} items, estimates {e_items.shape[0]}")
        for col in ("d", "a0", "a1"):
            if col not in e_items or col not in t_items:
                raise DataError(f"{tag}: item files need column {col}")
        t_ids, t_eta, _ = fio.read_matrix(truth_dir / f"{tag}_eta.csv")
        e_ids, e_eta, _ = fio.read_matrix(est_dir / f"{tag}_eta.csv")
        fio.align_ids(ids, t_ids, f"{tag}_eta.csv (truth)")
        fio.align_ids(ids, e_ids, f"{tag}_eta.csv (estimates)")
        if t_eta.shape != e_eta.shape or t_eta.shape[1] != t_items.shape[0]:
            raise DataError(f"{tag}: nuisance score matrices have shapes {t_eta.shape} and {e_eta.shape}")
        theta_path = est_dir / f"{tag}_theta.csv"
        if theta_path.exists():
            th_ids, th, _ = fio.read_matrix(theta_path)
            fio.align_ids(ids, th_ids, f"{tag}_theta.csv")
            bench, corrected = th[:, 0], th[:, 1]
        else:
            _, est_persons, _ = fio.read_matrix(est_dir / f"{tag}_persons.csv")
            bench = corrected = est_persons[:, 0]

        def col(frame, name):
            return frame[name].to_numpy(dtype=float) if name in frame else np.full(frame.shape[0], np.nan)

        estimates = [
            ItemEstimate(
                item=int(e_items["item"].iloc[i]) if "item" in e_items else i,
                method=str(e_items["method"].iloc[i]) if "method" in e_items else "",
                d=float(e_items["d"].iloc[i]),
                a0=float(e_items["a0"].iloc[i]),
                a1=float(e_items["a1"].iloc[i]),
                omega=None,
                eta_hat=e_eta[:, i],
                objective_before=float(col(e_items, "objective_before")[i]),
                objective_after=float(col(e_items, "objective_after")[i]),
                fi_before=float(col(e_items, "fi_before")[i]),
                fi_after=float(col(e_items, "fi_after")[i]),
            )
            for i in range(e_items.shape[0])
        ]
        records.append(
            ReplicationRecord(
                rep=int(tag[3:]),
                theta=persons[:, 0],
                groups=persons[:, 1],
                true_d=t_items["d"].to_numpy(dtype=float),
                true_a0=t_items["a0"].to_numpy(dtype=float),
                true_a1=t_items["a1"].to_numpy(dtype=float),
                true_eta=[t_eta[:, i] for i in range(t_eta.shape[1])],
                estimates=estimates,
                theta_benchmark=bench,
                theta_corrected=corrected,
            )
        )
    return records


def cmd_eval(args):
    out = _require_out(args)
    records = load_records(args.truth, args.estimates)
    meta_path = args.truth / "meta.json"
    meta = fio.read_json(meta_path) if meta_path.exists() else {}
    config = meta.get("config", {})
    failures = meta.get("failures", [])
    report = aggregate(config, [replication_metrics(r) for r in records], failures)
    inputs = sorted(glob.glob(str(args.truth / "*"))) + sorted(glob.glob(str(args.estimates / "*")))
    manifest = fio.build_manifest("eval", {"truth": str(args.truth), "estimates": str(args.estimates)}, inputs)
    fio.write_json(out / "eval_report.json", report.to_dict(), manifest)
    fio.write_json(out / "manifest.json", manifest)
    print(f"evaluated {report.replications} replication(s): corr_eta={report.corr_eta:.4f} mse_d={report.mse_d:.4f}")
    return EXIT_OK


# --- detect / correct / score -------------------------------------------------------


def _resolve(base, value):
    path = Path(value)
    return path if path.is_absolute() else Path(base) / path


def _index_list(spec, names, field):
    """Item or group references (names or 0-based indices) to indices."""
    if spec is None:
        return None
    if isinstance(spec, str):
        spec = [s.strip() for s in spec.split(",") if s.strip()]
    out = []
    for s in _as_list(spec):
        if isinstance(s, (int, np.integer)) and not isinstance(s, bool):
            idx = int(s)
        elif str(s) in names:
            idx = names.index(str(s))
        elif str(s).lstrip("-").isdigit():
            idx = int(s)
        else:
            raise ConfigError(f"unknown reference {s!r}", field)
        if not 0 <= idx < len(names):
            raise ConfigError(f"reference {s!r} out of range", field)
        out.append(idx)
    return out


PIPELINE_KEYS = {
    "responses", "groups", "features", "features_dir", "link", "anchors", "group_columns",
    "nonuniform", "alpha", "restarts", "seed", "initial_scoring",
}


def load_assessment(args):
    """Read the data files named in the configuration and the pipeline settings."""
    if args.config is None:
        raise ConfigError("--config is required", "config")
    raw = fio.read_config(args.config)
    unknown = sorted(set(raw) - PIPELINE_KEYS)
    if unknown:
        raise ConfigError(f"unknown setting(s) {unknown}", unknown[0])
    base = Path(args.config).parent
    for key in ("responses", "groups"):
        if key not in raw:
            raise ConfigError("missing file path", key)
    resp_path = _resolve(base, raw["responses"])
    ids, Y, item_names = fio.read_matrix(resp_path)
    g_ids, G, group_names = fio.read_matrix(_resolve(base, raw["groups"]))
    fio.align_ids(ids, g_ids, "the groups file")
    inputs = [args.config, resp_path, _resolve(base, raw["groups"])]

    feature_paths = {}
    if raw.get("features_dir") is not None:
        fdir = _resolve(base, raw["features_dir"])
        for j, name in enumerate(item_names):
            cand = fdir / f"{name}.csv"
            if cand.exists():
                feature_paths[j] = cand
    for key, value in (raw.get("features") or {}).items():
        idx = _index_list([key], item_names, "features")[0]
        feature_paths[idx] = _resolve(base, value)
    features = {}
    for j, path in sorted(feature_paths.items()):
        f_ids, X, _ = fio.read_matrix(path)
        fio.align_ids(ids, f_ids, Path(path).name)
        features[j] = X
        inputs.append(path)

    settings = {
        "link": args.link or raw.get("link", "identity"),
        "anchor_items": _index_list(args.anchors if args.anchors is not None else raw.get("anchors"), item_names, "anchors"),
        "group_columns": _index_list(raw.get("group_columns"), group_names, "group_columns"),
        "nonuniform": True if args.nonuniform else bool(raw.get("nonuniform", False)),
        "alpha_level": args.alpha if args.alpha is not None else raw.get("alpha", 0.05),
        "restarts": raw.get("restarts", 8),
        "seed": args.seed if args.seed is not None else raw.get("seed", 0),
        "initial_scoring": raw.get("initial_scoring", "ml"),
    }
    config = PipelineConfig(**settings)
    data = AssessmentData(Y, G, features, item_names=item_names, group_names=group_names, respondent_ids=ids)
    return data, config, inputs


def _write_traits(path, data, est, manifest):
    frame = pd.DataFrame(
        {
            "id": data.respondent_ids,
            "theta": est.theta,
            "bounds_hit": est.bounds_hit.astype(int),
            "provenance": est.provenance,
        }
    )
    fio.write_frame(path, frame, manifest)


def _detection_frame(report):
    return pd.DataFrame(
        [
            {
                "item": r.item_name,
                "group": r.group_name,
                "term": r.term,
                "estimate": r.estimate,
                "se": r.se,
                "z": r.z,
                "p_value": r.p_value,
                "significant": int(r.significant),
            }
            for r in report.rows
        ],
        columns=["item", "group", "term", "estimate", "se", "z", "p_value", "significant"],
    )


def _detection_summary(data, report, config):
    return {
        "config": config.to_dict(),
        "alpha_level": report.alpha_level,
        "anchor_items": [data.item_names[j] for j in report.anchor_items],
        "tested_items": [data.item_names[j] for j in report.tested_items],
        "dif_items": [data.item_names[j] for j in report.dif_items],
        "failures": {f"{data.item_names[j]}|{data.group_names[m]}": msg for (j, m), msg in report.failures.items()},
    }


def cmd_detect(args):
    out = _require_out(args)
    data, config, inputs = load_assessment(args)
    report = run_detection(data, config)
    manifest = fio.build_manifest("detect", config.to_dict(), inputs, seed=config.seed)
    fio.write_frame(out / "detection.csv", _detection_frame(report), manifest)
    fio.write_json(out / "detection.json", _detection_summary(data, report, config), manifest)
    _write_traits(out / "theta_initial.csv", data, report.theta0, manifest)
    fio.write_json(out / "manifest.json", manifest)
    print(f"{len(report.dif_items)} of {len(report.tested_items)} tested item(s) flagged")
    return EXIT_OK


def _detection_from_file(path, data, config):
    doc = fio.read_json(path)
    if "dif_items" not in doc:
        raise DataError(f"{path}: missing dif_items")
    dif = _index_list(doc["dif_items"], data.item_names, "dif_items")
    return DetectionReport(
        rows=[],
        dif_items=sorted(dif),
        tested_items=_index_list(doc.get("tested_items", []), data.item_names, "tested_items"),
        anchor_items=_index_list(doc.get("anchor_items", []), data.item_names, "anchor_items"),
        theta0=initial_traits(data, config),
        alpha_level=float(doc.get("alpha_level", config.alpha_level)),
    )


def bank_document(data, bank):
    return {
        "link": bank.items[0].link.value,
        "items": [
            {
                "name": data.item_names[j],
                "d": it.d,
                "a0": it.a0,
                "a1": it.a1,
                "sigma2": it.sigma2,
                "omega": None if it.omega is None else list(map(float, it.omega)),
                "dif": j in bank.dif_set,
            }
            for j, it in enumerate(bank.items)
        ],
    }


def cmd_correct(args):
    out = _require_out(args)
    data, config, inputs = load_assessment(args)
    if args.detection is not None:
        detection = _detection_from_file(args.detection, data, config)
        inputs.append(args.detection)
    else:
        detection = run_detection(data, config)
    report = run_correction(data, detection, config)
    manifest = fio.build_manifest("correct", config.to_dict(), inputs, seed=config.seed)
    rows, weights = [], []
    for c in report.items:
        fit = c.fit
        rows.append(
            {
                "item": c.item_name,
                "status": c.status,
                "method": c.method or "",
                "d": fit.d if fit else np.nan,
                "a0": fit.a0 if fit else np.nan,
                "a1": fit.a1 if fit else np.nan,
                "sigma2": fit.sigma2 if fit and fit.sigma2 is not None else np.nan,
                "objective_before": c.objective_before,
                "objective_after": c.objective_after,
                "fi_before": c.fi_before,
                "fi_after": c.fi_after,
                "message": c.message,
            }
        )
        if c.omega is not None:
            weights.extend({"item": c.item_name, "feature": k, "weight": w} for k, w in enumerate(c.omega))
    fio.write_frame(out / "correction.csv", pd.DataFrame(rows, columns=[
        "item", "status", "method", "d", "a0", "a1", "sigma2", "objective_before",
        "objective_after", "fi_before", "fi_after", "message"]), manifest)
    fio.write_frame(out / "omega.csv", pd.DataFrame(weights, columns=["item", "feature", "weight"]), manifest)
    corrected = report.corrected
    if corrected:
        fio.write_matrix(
            out / "eta.csv",
            data.respondent_ids,
            np.column_stack([c.eta for c in corrected]),
            [c.item_name for c in corrected],
            manifest,
        )
    _write_traits(out / "theta.csv", data, report.theta, manifest)
    fio.write_json(out / "bank.json", bank_document(data, report.bank), manifest)
    fio.write_json(
        out / "correction.json",
        {
            "config": config.to_dict(),
            "dif_items": [data.item_names[j] for j in detection.dif_items],
            "corrected_items": [c.item_name for c in corrected],
            "uncorrected_items": {c.item_name: c.message for c in report.items if c.status != "corrected"},
        },
        manifest,
    )
    fio.write_json(out / "manifest.json", manifest)
    print(f"{len(corrected)} of {len(report.items)} flagged item(s) corrected")
    return EXIT_OK


def load_bank(path, data, config):
    doc = fio.read_json(path)
    entries = doc.get("items")
    if not isinstance(entries, list) or len(entries) != data.j:
        raise DataError(f"{path}: bank lists {0 if not entries else len(entries)} items, responses have {data.j}")
    items, dif = [], set()
    for j, e in enumerate(entries):
        if e.get("name") != data.item_names[j]:
            raise DataError(f"{path}: item {j} is {e.get('name')!r}, responses have {data.item_names[j]!r}")
        eta = None
        omega = e.get("omega")
        if e.get("dif"):
            if j not in data.features:
                raise DataError(f"features for corrected item {data.item_names[j]} are required")
            omega = np.asarray(omega, dtype=float)
            if omega.shape[0] != data.features[j].shape[1]:
                raise DataError(f"{data.item_names[j]}: {omega.shape[0]} weights for {data.features[j].shape[1]} features")
            eta = data.features[j] @ omega
            dif.add(j)
        items.append(
            ItemParams(
                link=doc.get("link", config.link),
                d=e["d"],
                a0=e["a0"],
                a1=e.get("a1", 0.0) if e.get("dif") else 0.0,
                sigma2=e.get("sigma2"),
                eta=eta,
                omega=omega if e.get("dif") else None,
                name=e.get("name"),
            )
        )
    return ItemBank(items, frozenset(dif))


def cmd_score(args):
    out = _require_out(args)
    data, config, inputs = load_assessment(args)
    if args.provenance == "initial":
        est = initial_traits(data, config)
    else:
        if args.bank is None:
            raise ConfigError("--bank is required for this provenance", "bank")
        bank = load_bank(args.bank, data, config)
        inputs.append(args.bank)
        if args.provenance == "dif_corrected":
            est = update_theta(bank, data.responses)
        else:
            dif = sorted(bank.dif_set)
            if not dif:
                raise DataError("the bank has no corrected items")
            theta0 = initial_traits(data, config).theta
            est = benchmark_theta_uncorrected(data.responses[:, dif], theta0, config.link)
    manifest = fio.build_manifest("score", dict(config.to_dict(), provenance=args.provenance), inputs, seed=config.seed)
    _write_traits(out / "theta.csv", data, est, manifest)
    fio.write_json(out / "manifest.json", manifest)
    print(f"scored {data.n} respondent(s) ({est.provenance}); {int(est.bounds_hit.sum())} at a bound")
    return EXIT_OK


# --- entry point --------------------------------------------------------------------


def main(argv=None):
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"procdif: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return args.handler(args)
    except ConfigError as exc:
        where = f" [{exc.field}]" if getattr(exc, "field", None) else ""
        print(f"procdif: configuration error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"procdif: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ProcDifError) as exc:
        print(f"procdif: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"procdif: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
