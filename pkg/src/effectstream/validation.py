"""Input validation helpers shared by the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatchError


def check_covariates(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"covariates must be a 2-D array, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("covariate matrix has no rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("covariates contain non-finite values")
    return X


def check_treatment(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.shape[0] != n:
        raise DimensionMismatchError(f"treatment has {t.shape[0]} entries, expected {n}")
    values = np.unique(t)
    if not np.all(np.isin(values, (0.0, 1.0))):
        raise ValueError(f"treatment must be binary 0/1, found values {values}")
    return t


def check_outcome(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise DimensionMismatchError(f"outcome has {y.shape[0]} entries, expected {n}")
    if not np.all(np.isfinite(y)):
        raise ValueError("outcomes contain non-finite values")
    return y


def check_Xty(X, t, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = check_covariates(X)
    return X, check_treatment(t, X.shape[0]), check_outcome(y, X.shape[0])
