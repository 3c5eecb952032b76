"""File formats: delimited matrices, structured documents and run manifests.

Matrices are UTF-8 comma-separated text with a header row and the respondent
identifier in the first column. Floats are written with 17 significant digits
so a write-read cycle is lossless. Every output file carries the digest of the
run manifest, as a leading ``# manifest <digest>`` line in CSV files and as a
``manifest`` key in JSON documents.
"""

import hashlib
import io
import json
import os
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .exceptions import ConfigError, DataError

FLOAT_FORMAT = "%.17g"
MANIFEST_PREFIX = "# manifest "
MAX_LISTED_OFFENDERS = 10


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def file_digest(path):
    return sha256_bytes(Path(path).read_bytes())


def canonical_json(obj):
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"), allow_nan=True)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [to_jsonable(v) for v in items]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


# --- manifest -----------------------------------------------------------------


def build_manifest(command, config, inputs=(), seed=None, version=None):
    """Run manifest. The digest covers everything except the timestamp."""
    from . import __version__

    body = {
        "command": command,
        "config_digest": sha256_bytes(canonical_json(config).encode()),
        "inputs": {str(Path(p).name): file_digest(p) for p in sorted(inputs, key=str)},
        "seed": None if seed is None else int(seed),
        "tool_version": version or __version__,
    }
    digest = sha256_bytes(canonical_json(body).encode())[:16]
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    stamp = float(epoch) if epoch else time.time()
    created = datetime.fromtimestamp(stamp, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return dict(body, digest=digest, created_utc=created)


# --- JSON / YAML --------------------------------------------------------------


def write_json(path, payload, manifest=None):
    doc = to_jsonable(payload)
    if manifest is not None:
        doc = dict(doc, manifest=manifest["digest"])
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=2, allow_nan=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def read_config(path):
    """Parse a YAML or JSON configuration document into a mapping."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}", "config") from None
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse configuration: {exc}", "config") from None
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a mapping", "config")
    return cfg


# --- CSV -----------------------------------------------------------------------


def frame_to_csv(frame, manifest=None):
    buf = io.StringIO()
    if manifest is not None:
        buf.write(f"{MANIFEST_PREFIX}{manifest['digest']}\n")
    frame.to_csv(buf, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return buf.getvalue()


def write_frame(path, frame, manifest=None):
    atomic_write_text(path, frame_to_csv(frame, manifest))


def write_matrix(path, ids, matrix, columns, manifest=None, id_name="id"):
    matrix = np.asarray(matrix)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    frame = pd.DataFrame(matrix, columns=list(columns))
    frame.insert(0, id_name, list(ids))
    write_frame(path, frame, manifest)


def read_frame(path):
    """CSV file into a DataFrame, skipping leading ``#`` lines."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    start = 0
    while start < len(lines) and lines[start].startswith("#"):
        start += 1
    body = "".join(lines[start:])
    if not body.strip():
        raise DataError(f"{path}: no header row")
    try:
        return pd.read_csv(io.StringIO(body), dtype={0: str}, float_precision="round_trip")
    except (pd.errors.ParserError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def read_manifest_digest(path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith(MANIFEST_PREFIX):
        return first[len(MANIFEST_PREFIX):].strip()
    return None


def read_matrix(path):
    """Read an id-first matrix file.

    Returns ``(ids, values, column_names)`` with ``values`` as floats; missing
    or non-numeric entries raise :class:`DataError`.
    """
    frame = read_frame(path)
    if frame.shape[1] < 2:
        raise DataError(f"{path}: needs an id column and at least one value column")
    ids = [str(v) for v in frame.iloc[:, 0]]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})[:MAX_LISTED_OFFENDERS]
        raise DataError(f"{path}: duplicated respondent ids {dup}")
    values = frame.iloc[:, 1:]
    try:
        values = values.apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from None
    arr = values.to_numpy(dtype=float)
    if np.isnan(arr).any():
        rows = np.flatnonzero(np.isnan(arr).any(axis=1))[:MAX_LISTED_OFFENDERS]
        raise DataError(f"{path}: missing values for respondents {[ids[r] for r in rows]}")
    return ids, arr, [str(c) for c in values.columns]


def align_ids(reference, other, label):
    """Check that ``other`` lists the same respondents in the same order."""
    if list(reference) == list(other):
        return
    ref = set(reference)
    offenders = [i for i in other if i not in ref] + [i for i in reference if i not in set(other)]
    if not offenders:
        offenders = [o for r, o in zip(reference, other) if r != o]
    raise DataError(
        f"respondent identifiers in {label} do not match the responses file; "
        f"first offenders: {offenders[:MAX_LISTED_OFFENDERS]}"
    )
