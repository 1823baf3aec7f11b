"""Least-squares fitting on named design matrices.

Rank deficiency is resolved greedily from left to right: a column whose
component orthogonal to the already retained columns is below the rank
tolerance is dropped, so the first of a set of collinear columns survives.
This keeps fits on dummy-heavy designs reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DataError, NumericalError

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class DesignMatrix:
    """Dense design matrix with named columns.

    Parameters
    ----------
    values : ndarray of shape (n, d)
    column_names : tuple of str
        Unique, one per column.
    includes_intercept : bool
        Whether one of the columns is a constant intercept.
    """

    values: np.ndarray
    column_names: tuple
    includes_intercept: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DataError(f"design matrix must be 2-D, got shape {values.shape}")
        n, d = values.shape
        if n < 1 or d < 1:
            raise DataError(f"design matrix needs at least one row and column, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("design matrix contains non-finite entries")
        names = tuple(str(c) for c in self.column_names)
        if len(names) != d:
            raise DataError(f"{len(names)} column names for {d} columns")
        if len(set(names)) != d:
            raise DataError("column names must be unique")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_names", names)

    @property
    def shape(self):
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_names.index(name)]

    def take_rows(self, rows) -> "DesignMatrix":
        return DesignMatrix(self.values[rows], self.column_names, self.includes_intercept)

    def select(self, names: Sequence[str]) -> "DesignMatrix":
        idx = [self.column_names.index(n) for n in names]
        intercept = self.includes_intercept and "intercept" in names
        return DesignMatrix(self.values[:, idx], tuple(names), intercept)


@dataclass(frozen=True)
class OlsFit:
    """Result of :func:`fit_ols`.

    ``coefficients`` has one entry per design column; dropped columns carry 0.
    ``sigma2_hat`` is ``None`` when the fit leaves no residual degrees of
    freedom, and ``r_squared`` is ``None`` for designs without an intercept.
    """

    column_names: tuple
    coefficients: np.ndarray
    fitted_values: np.ndarray
    residuals: np.ndarray
    rss: float
    sigma2_hat: Optional[float]
    r_squared: Optional[float]
    effective_rank: int
    dropped_columns: tuple = field(default=())

    @property
    def n_obs(self) -> int:
        return len(self.residuals)

    @property
    def retained_columns(self) -> tuple:
        dropped = set(self.dropped_columns)
        return tuple(c for c in self.column_names if c not in dropped)

    def coefficient_map(self) -> dict:
        return dict(zip(self.column_names, map(float, self.coefficients)))


def rank_tolerance(values: np.ndarray) -> float:
    n, d = values.shape
    return max(n, d) * _EPS * float(np.linalg.norm(values, axis=0).max(initial=0.0))


def retained_mask(values: np.ndarray) -> np.ndarray:
    """Boolean mask of columns kept by greedy left-to-right rank detection."""
    n, d = values.shape
    tol = rank_tolerance(values)
    basis = np.empty((n, min(n, d)))
    keep = np.zeros(d, dtype=bool)
    k = 0
    for j in range(d):
        if k == n:
            break
        v = values[:, j].copy()
        if k:
            q = basis[:, :k]
            # two passes of classical Gram-Schmidt keep v orthogonal to working precision
            v -= q @ (q.T @ v)
            v -= q @ (q.T @ v)
        norm = np.linalg.norm(v)
        if norm > tol:
            basis[:, k] = v / norm
            keep[j] = True
            k += 1
    return keep


def _solve(values: np.ndarray, y: np.ndarray):
    """Least squares over retained columns; returns (coef, keep, q)."""
    keep = retained_mask(values)
    coef = np.zeros(values.shape[1])
    if not keep.any():
        return coef, keep, np.zeros((values.shape[0], 0))
    q, r = np.linalg.qr(values[:, keep])
    coef[keep] = solve_triangular(r, q.T @ y)
    return coef, keep, q


def _check_response(X: DesignMatrix, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise DataError(f"response must be 1-D, got shape {y.shape}")
    if len(y) != X.shape[0]:
        raise DataError(f"response has {len(y)} entries, design has {X.shape[0]} rows")
    if not np.all(np.isfinite(y)):
        raise DataError("response contains non-finite entries")
    return y


def fit_ols(X: DesignMatrix, y) -> OlsFit:
    """Fit ordinary least squares of ``y`` on the columns of ``X``.

    Collinear columns are dropped (first occurrence kept) and reported in
    ``dropped_columns``.
    """
    y = _check_response(X, y)
    coef, keep, _ = _solve(X.values, y)
    fitted = X.values @ coef
    resid = y - fitted
    rss = float(resid @ resid)
    n = len(y)
    rank = int(keep.sum())
    sigma2 = rss / (n - rank) if n > rank else None
    r2 = None
    if X.includes_intercept:
        tss = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 if tss == 0.0 else min(1.0, max(0.0, 1.0 - rss / tss))
    dropped = tuple(c for c, k in zip(X.column_names, keep) if not k)
    for arr in (coef, fitted, resid):
        arr.setflags(write=False)
    return OlsFit(
        column_names=X.column_names,
        coefficients=coef,
        fitted_values=fitted,
        residuals=resid,
        rss=rss,
        sigma2_hat=sigma2,
        r_squared=r2,
        effective_rank=rank,
        dropped_columns=dropped,
    )


def predict(fit: OlsFit, X_new: DesignMatrix) -> np.ndarray:
    """Linear predictor ``X_new @ coefficients``, matching columns by name."""
    known = fit.coefficient_map()
    unknown = [c for c in X_new.column_names if c not in known]
    if unknown:
        raise DataError(f"columns not in fitted model: {unknown}")
    missing = [c for c in fit.retained_columns if c not in X_new.column_names]
    if missing:
        raise DataError(f"columns required by fitted model are missing: {missing}")
    beta = np.array([known[c] for c in X_new.column_names])
    return X_new.values @ beta


def leverages(X: DesignMatrix) -> np.ndarray:
    """Diagonal of the hat matrix of the retained design."""
    keep = retained_mask(X.values)
    q, _ = np.linalg.qr(X.values[:, keep])
    return np.einsum("ij,ij->i", q, q)


def loo_residuals(fit: OlsFit, X: DesignMatrix) -> np.ndarray:
    """Leave-one-out prediction residuals ``e_i / (1 - h_ii)``."""
    if X.shape[0] != fit.n_obs or X.column_names != fit.column_names:
        raise DataError("design does not match the fitted model")
    if fit.n_obs <= fit.effective_rank:
        raise DataError(f"need n > d for leave-one-out residuals (n={fit.n_obs}, d={fit.effective_rank})")
    h = leverages(X)
    bad = np.flatnonzero(h > 1.0 - 1e-10)
    if bad.size:
        raise NumericalError(f"observations {bad.tolist()} have leverage 1; leave-one-out residual undefined")
    return fit.residuals / (1.0 - h)
