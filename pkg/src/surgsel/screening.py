"""Univariate covariate screens: residual correlation, mutual information, drift."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, encode_design
from .errors import DataError
from .ols import fit_ols

CATEGORICAL_FIELDS = ("surgeon_id", "operation_type_id")


def _rank(scores: dict, k: Optional[int]) -> list:
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ordered if k is None else ordered[:k]


def pearson_abs(x: np.ndarray, r: np.ndarray) -> float:
    """Absolute Pearson correlation; zero when either side is constant."""
    xc = x - x.mean()
    rc = r - r.mean()
    sx = math.sqrt(float(xc @ xc))
    sr = math.sqrt(float(rc @ rc))
    if sx == 0.0 or sr == 0.0:
        return 0.0
    return min(1.0, abs(float(xc @ rc)) / (sx * sr))


def categorical_residuals(train: Dataset) -> np.ndarray:
    """Residuals of log duration on surgeon and operation-type dummies."""
    X = encode_design(train, (), CATEGORICAL_FIELDS, include_intercept=True)
    return fit_ols(X, train.log_durations).residuals


def residual_filter(train: Dataset, k: int, candidates: Optional[Sequence[str]] = None) -> list:
    """Rank covariates by absolute correlation with the categorical-model residuals.

    Returns the top ``k`` ``(name, |r|)`` pairs, largest first, ties by name.
    """
    if len(train) == 0:
        raise DataError("residual filter needs a nonempty training set")
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    resid = categorical_residuals(train)
    names = train.covariate_names if candidates is None else tuple(candidates)
    X = train.covariate_matrix(names)
    scores = {name: pearson_abs(X[:, i], resid) for i, name in enumerate(names)}
    return _rank(scores, k)


def equal_frequency_bins(x: np.ndarray, bins: int) -> np.ndarray:
    """Integer bin codes from empirical quantile edges; ties share a bin."""
    edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, bins + 1)[1:-1]))
    return np.searchsorted(edges, x, side="right")


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) between two discrete code arrays."""
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))
    return max(mi, 0.0)


def mutual_information_rank(train: Dataset, k: int = 200, bins: int = 10) -> list:
    """Rank covariates by mutual information with log duration.

    Non-indicator covariates and the response are discretized into ``bins``
    equal-frequency bins. ``k`` is capped at the number of covariates.
    """
    y_codes = equal_frequency_bins(train.log_durations, bins)
    scores = {}
    for spec in train.schema:
        x = train.covariate_matrix([spec.name])[:, 0]
        codes = x if spec.kind == "indicator" else equal_frequency_bins(x, bins)
        scores[spec.name] = mutual_information(codes, y_codes)
    return _rank(scores, min(k, len(scores)))


def standardized_mean_differences(train: Dataset, test: Dataset) -> dict:
    if train.schema != test.schema:
        raise DataError("train and test must share a covariate schema")
    a, b = train.covariate_array, test.covariate_array
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        return {}
    diff = np.abs(a.mean(axis=0) - b.mean(axis=0))
    ss = a.var(axis=0) * n1 + b.var(axis=0) * n2
    dof = n1 + n2 - 2
    pooled = np.sqrt(ss / dof) if dof > 0 else np.zeros_like(diff)
    out = {}
    for name, d, s in zip(train.covariate_names, diff, pooled):
        if s > 0:
            out[name] = float(d / s)
        else:
            out[name] = math.inf if d > 0 else 0.0
    return out


def drift_screen(train: Dataset, test: Dataset, threshold: float = 0.5) -> list:
    """Covariates whose train/test standardized mean difference exceeds ``threshold``.

    A covariate that is constant in both sets but at different values gets
    an infinite score and is always flagged.
    """
    smd = standardized_mean_differences(train, test)
    flagged = {n: v for n, v in smd.items() if v > threshold}
    return _rank(flagged, None)
