"""Input validation helpers."""

import numpy as np

from .exceptions import DataError


def as_vector(x, name, n=None, dtype=float):
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.ravel()
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DataError(f"{name} has length {arr.shape[0]}, expected {n}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains missing or non-finite values")
    return arr


def as_matrix(x, name, n=None, min_cols=0):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(n or 0, 0)
    if arr.ndim != 2:
        raise DataError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DataError(f"{name} has {arr.shape[0]} rows, expected {n}")
    if arr.shape[1] < min_cols:
        raise DataError(f"{name} needs at least {min_cols} columns")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains missing or non-finite values")
    return arr


def is_binary(col):
    return bool(np.all((col == 0) | (col == 1)))


def check_binary_responses(y, name="responses"):
    if not is_binary(y):
        raise DataError(f"{name} must be coded 0/1 for a binary link")
    return y


def check_group_columns(groups, name="groups"):
    """Binary columns must contain both 0 and 1; real columns must vary."""
    for m in range(groups.shape[1]):
        col = groups[:, m]
        if is_binary(col):
            if col.min() == col.max():
                raise DataError(f"{name} column {m} is binary but has a single level")
        elif np.ptp(col) == 0:
            raise DataError(f"{name} column {m} is constant")
    return groups


def unit(v):
    v = np.asarray(v, dtype=float)
    nrm = np.linalg.norm(v)
    if nrm == 0 or not np.isfinite(nrm):
        raise DataError("cannot normalize a zero or non-finite vector")
    return v / nrm
