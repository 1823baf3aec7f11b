"""Comparison models: pooled global regression, forward selection and LASSO."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from numba import njit

from .data import Dataset, LinearPredictor, build_encoder
from .errors import ConvergenceError, DataError
from .ols import OlsFit, fit_ols, retained_mask

CATEGORICAL_FIELDS = ("surgeon_id", "operation_type_id")


@dataclass(frozen=True)
class GlobalModel:
    fit: OlsFit
    predictor: LinearPredictor

    def predict(self, data: Dataset) -> np.ndarray:
        return self.predictor.predict(data)


def fit_global(train: Dataset, extra_covariates: Optional[Sequence[str]] = None) -> GlobalModel:
    """Least squares of log duration on surgeon and operation-type dummies
    plus ``extra_covariates`` (all schema covariates when ``None``)."""
    extra = train.covariate_names if extra_covariates is None else tuple(extra_covariates)
    enc = build_encoder(train, extra, CATEGORICAL_FIELDS, include_intercept=True)
    f = fit_ols(enc.transform(train), train.log_durations)
    return GlobalModel(f, LinearPredictor(enc, tuple(f.coefficients)))


# --------------------------------------------------------------------------
# forward selection
# --------------------------------------------------------------------------


def forward_select(train: Dataset, pool: Sequence[str], max_k: int) -> list:
    """Greedy forward selection by training RSS.

    Starts from intercept + surgeon and operation-type dummies and adds the
    pool covariate with the largest RSS decrease until ``max_k`` are chosen.
    Equal decreases go to the lexicographically first name.
    """
    if max_k > len(pool):
        raise DataError(f"max_k={max_k} exceeds pool size {len(pool)}")
    if max_k <= 0:
        return []
    names = sorted(pool)
    base = build_encoder(train, (), CATEGORICAL_FIELDS, include_intercept=True).transform(train).values
    q, _ = np.linalg.qr(base[:, retained_mask(base)])
    y = train.log_durations
    r = y - q @ (q.T @ y)
    Z = train.covariate_matrix(names)
    Z = Z - q @ (q.T @ Z)
    col_tol = (len(y) * np.finfo(float).eps) * np.maximum(np.linalg.norm(train.covariate_matrix(names), axis=0), 1.0)
    available = np.ones(len(names), dtype=bool)
    chosen = []
    for _ in range(max_k):
        norms = np.linalg.norm(Z, axis=0)
        usable = available & (norms > col_tol)
        gain = np.zeros(len(names))
        gain[usable] = (Z[:, usable].T @ r) ** 2 / norms[usable] ** 2
        gain[~available] = -1.0
        j = int(np.argmax(gain))
        chosen.append(names[j])
        available[j] = False
        if usable[j]:
            qj = Z[:, j] / norms[j]
            r = r - qj * (qj @ r)
            Z = Z - np.outer(qj, qj @ Z)
    return chosen


# --------------------------------------------------------------------------
# LASSO
# --------------------------------------------------------------------------


@njit(cache=True)
def _cd_path(G, c, lambdas, tol, max_sweeps, active):
    p = c.shape[0]
    beta = np.zeros(p)
    path = np.zeros((lambdas.shape[0], p))
    for li in range(lambdas.shape[0]):
        lam = lambdas[li]
        sweeps = 0
        while True:
            max_delta = 0.0
            for j in range(p):
                if not active[j]:
                    continue
                rho = c[j] - G[j] @ beta + G[j, j] * beta[j]
                if rho > lam:
                    new = (rho - lam) / G[j, j]
                elif rho < -lam:
                    new = (rho + lam) / G[j, j]
                else:
                    new = 0.0
                delta = abs(new - beta[j])
                if delta > max_delta:
                    max_delta = delta
                beta[j] = new
            sweeps += 1
            if max_delta < tol:
                break
            if sweeps >= max_sweeps:
                return path, li
        path[li] = beta
    return path, -1


@dataclass(frozen=True)
class Standardization:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float

    def apply(self, X: np.ndarray) -> np.ndarray:
        scale = np.where(self.x_scale > 0, self.x_scale, 1.0)
        return (X - self.x_mean) / scale


def standardize(X: np.ndarray, y: np.ndarray) -> Standardization:
    return Standardization(X.mean(axis=0), X.std(axis=0), float(y.mean()))


def lambda_max(Z: np.ndarray, yc: np.ndarray) -> float:
    return float(np.max(np.abs(Z.T @ yc)) / len(yc)) if Z.shape[1] else 0.0


def lasso_path(X, y, lambdas=None, n_lambdas: int = 100, ratio: float = 1e-4, tol: float = 1e-7, max_sweeps: int = 100_000):
    """Coordinate-descent LASSO path on internally standardized data.

    Minimizes ``||yc - Z b||^2 / (2n) + lam * ||b||_1`` for each ``lam`` in
    decreasing order with warm starts, where ``Z`` has centered unit-variance
    columns and ``yc`` is the centered response. Constant columns stay at 0.

    Returns
    -------
    lambdas : ndarray
    beta_std : ndarray, shape (n_lambdas, p)
        Coefficients on the standardized scale.
    std : Standardization
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    std = standardize(X, y)
    Z = std.apply(X)
    yc = y - std.y_mean
    n = len(y)
    if lambdas is None:
        lmax = lambda_max(Z, yc)
        lambdas = np.geomspace(lmax, lmax * ratio, n_lambdas) if lmax > 0 else np.zeros(1)
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas < 0):
        raise DataError("lambdas must be nonnegative")
    active = std.x_scale > 0
    G = Z.T @ Z / n
    c = Z.T @ yc / n
    path, failed = _cd_path(G, c, lambdas, tol, max_sweeps, active)
    if failed >= 0:
        raise ConvergenceError(f"coordinate descent did not converge in {max_sweeps} sweeps at lambda={lambdas[failed]:.6g}")
    return lambdas, path, std


def to_original_scale(beta_std: np.ndarray, std: Standardization):
    """(intercept, coefficients) on the scale of the unstandardized inputs."""
    scale = np.where(std.x_scale > 0, std.x_scale, 1.0)
    coef = np.where(std.x_scale > 0, beta_std / scale, 0.0)
    return std.y_mean - float(std.x_mean @ coef), coef


def _folds(n: int, k: int, rng: np.random.Generator) -> list:
    return np.array_split(rng.permutation(n), k)


@dataclass(frozen=True)
class LassoResult:
    column_names: tuple
    lambdas: np.ndarray
    coef_path: np.ndarray
    intercept_path: np.ndarray
    cv_mse: np.ndarray
    best_index: int
    predictor: LinearPredictor

    @property
    def lambda_best(self) -> float:
        return float(self.lambdas[self.best_index])

    @property
    def coefficients(self) -> np.ndarray:
        return self.coef_path[self.best_index]

    @property
    def intercept(self) -> float:
        return float(self.intercept_path[self.best_index])

    def l1_path(self) -> np.ndarray:
        return np.abs(self.coef_path).sum(axis=1)

    def predict(self, data: Dataset) -> np.ndarray:
        return self.predictor.predict(data)


def lasso_cv(X: np.ndarray, y: np.ndarray, lambdas=None, cv_folds: int = 10, seed: int = 0, **path_kw):
    """Full-data path plus k-fold CV error per lambda; returns (lambdas, path, std, cv_mse)."""
    lambdas, path, std = lasso_path(X, y, lambdas, **path_kw)
    n = len(y)
    if cv_folds < 2 or cv_folds > n:
        raise DataError(f"cv_folds must be in [2, n], got {cv_folds}")
    sq = np.zeros(len(lambdas))
    for hold in _folds(n, cv_folds, np.random.default_rng(seed)):
        train = np.ones(n, dtype=bool)
        train[hold] = False
        _, fpath, fstd = lasso_path(X[train], y[train], lambdas, **path_kw)
        for li in range(len(lambdas)):
            b0, b = to_original_scale(fpath[li], fstd)
            e = y[hold] - (b0 + X[hold] @ b)
            sq[li] += float(e @ e)
    return lambdas, path, std, sq / n


def lasso_fit(
    train: Dataset,
    lambda_grid: Union[str, Sequence[float]] = "auto",
    cv_folds: int = 10,
    seed: int = 0,
    covariates: Optional[Sequence[str]] = None,
) -> LassoResult:
    """LASSO on surgeon/operation-type dummies plus numeric covariates.

    The penalty strength minimizes ``cv_folds``-fold CV squared error; the
    intercept is unpenalized and coefficients are reported on the original
    scale.
    """
    cov = train.covariate_names if covariates is None else tuple(covariates)
    enc = build_encoder(train, cov, CATEGORICAL_FIELDS, include_intercept=False)
    X = enc.transform(train).values
    y = train.log_durations
    grid = None if isinstance(lambda_grid, str) else np.sort(np.asarray(lambda_grid, dtype=float))[::-1]
    lambdas, path, std, cv_mse = lasso_cv(X, y, grid, cv_folds, seed)
    coefs = np.empty_like(path)
    intercepts = np.empty(len(lambdas))
    for li in range(len(lambdas)):
        intercepts[li], coefs[li] = to_original_scale(path[li], std)
    best = int(np.argmin(cv_mse))
    full_enc = build_encoder(train, cov, CATEGORICAL_FIELDS, include_intercept=True)
    predictor = LinearPredictor(full_enc, (intercepts[best],) + tuple(coefs[best]))
    return LassoResult(enc.column_names, lambdas, coefs, intercepts, cv_mse, best, predictor)


# --------------------------------------------------------------------------
# filter-then-refit baselines and external predictions
# --------------------------------------------------------------------------


def refit_global_on(train: Dataset, selected: Sequence[str]) -> GlobalModel:
    """Global model restricted to ``selected`` numeric covariates."""
    return fit_global(train, tuple(selected))


def load_external_predictions(path) -> dict:
    """Read ``record_id,predicted_log_duration`` rows into a dict."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"record_id", "predicted_log_duration"} <= set(reader.fieldnames):
            raise DataError(f"{path}: header must contain record_id and predicted_log_duration")
        for i, row in enumerate(reader, start=1):
            try:
                v = float(row["predicted_log_duration"])
            except ValueError:
                raise DataError(f"{path}: row {i}, column predicted_log_duration: not a number") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {i}, column predicted_log_duration: non-finite value")
            out[row["record_id"]] = v
    return out
