"""Input checks for the estimator wrappers (complex-aware, unlike ``sklearn.utils.check_array``)."""
import numpy as np

from .exceptions import GridMismatchError


def check_modes(X, dim):
    """Return ``X`` as a 2-D complex array with ``dim`` columns and finite entries."""
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D array of stacked mode vectors, got shape {X.shape}")
    if X.shape[1] != dim:
        raise GridMismatchError(f"expected {dim} columns (stacked abar, a), got {X.shape[1]}")
    X = X.astype(complex, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


def check_cauchy(X, sites):
    """Return ``X`` as a 2-D real array ``[phi | pi]`` with ``2 * sites`` columns."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != 2 * sites:
        raise GridMismatchError(f"expected {2 * sites} columns ([phi | pi] flattened), got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X
