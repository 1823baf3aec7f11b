"""Prediction-error metrics, repeated k-fold CV, kernel smoothing and reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DataError
from .ols import DesignMatrix, _solve, retained_mask
from .plotting import error_scatter_svg


def rmse_log(predicted, actual) -> float:
    """Root mean squared difference of log durations, times 100 (percent scale)."""
    p = np.asarray(predicted, dtype=float)
    a = np.asarray(actual, dtype=float)
    if p.shape != a.shape:
        raise DataError(f"length mismatch: {p.shape} vs {a.shape}")
    if p.size == 0:
        raise DataError("rmse of an empty sequence")
    return 100.0 * math.sqrt(float(np.mean((p - a) ** 2)))


def repeated_kfold(X: DesignMatrix, y, k: int = 10, reps: int = 500, seed: int = 0) -> float:
    """Mean squared held-out error of OLS over ``reps`` shuffled k-fold splits.

    Every repetition scores each observation exactly once, so the result is
    the mean over all ``reps * n`` held-out squared errors. Repetition ``r``
    shuffles with a generator spawned from ``seed``.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n != X.shape[0]:
        raise DataError(f"response has {n} entries, design has {X.shape[0]} rows")
    if k < 2 or n < k:
        raise DataError(f"need 2 <= k <= n, got k={k}, n={n}")
    if reps < 1:
        raise DataError("reps must be positive")
    rank = int(retained_mask(X.values).sum())
    smallest_train = n - math.ceil(n / k)
    if smallest_train <= rank:
        raise DataError(f"fold training size {smallest_train} too small for {rank} parameters")
    values = X.values
    total = 0.0
    for ss in np.random.SeedSequence(seed).spawn(reps):
        perm = np.random.default_rng(ss).permutation(n)
        for hold in np.array_split(perm, k):
            train = np.ones(n, dtype=bool)
            train[hold] = False
            coef, _, _ = _solve(values[train], y[train])
            e = y[hold] - values[hold] @ coef
            total += float(e @ e)
    return total / (reps * n)


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(x) ** (-0.2)


def kernel_smooth(
    sizes,
    errors,
    bandwidth: Union[str, float] = "auto",
    query: Optional[Sequence[float]] = None,
    n_grid: int = 100,
):
    """Nadaraya-Watson smoothing of ``errors`` against ``log(sizes)``.

    Gaussian kernel on the log scale; ``"auto"`` uses Silverman's rule. The
    curve is evaluated at ``query`` or on ``n_grid`` log-spaced points over
    ``[min(sizes), max(sizes)]``.

    Returns
    -------
    query : ndarray
    smoothed : ndarray
    """
    n = np.asarray(sizes, dtype=float)
    e = np.asarray(errors, dtype=float)
    if n.shape != e.shape or n.size < 2:
        raise DataError("kernel smoothing needs at least two (size, error) points")
    if np.any(n <= 0):
        raise DataError("sample sizes must be positive")
    x = np.log(n)
    if bandwidth == "auto":
        h = silverman_bandwidth(x)
        if not h > 0:
            raise DataError("all points share one sample size; pass an explicit bandwidth")
    else:
        h = float(bandwidth)
        if not h > 0:
            raise DataError("bandwidth must be positive")
    if query is None:
        query = np.exp(np.linspace(x.min(), x.max(), n_grid))
    q = np.log(np.asarray(query, dtype=float))
    z = (q[:, None] - x[None, :]) / h
    # shift by the row minimum so far-away queries do not underflow to 0/0
    logw = -0.5 * (z**2 - np.min(z**2, axis=1, keepdims=True))
    w = np.exp(logw)
    return np.exp(q), (w @ e) / w.sum(axis=1)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

TASK_COLUMNS = (
    "task_key",
    "mode",
    "n_train",
    "n_test",
    "mean_log_duration",
    "cv_rmse_pct",
    "test_rmse_pct",
    "cp_rmse_pct",
    "n_fallback",
)
AGGREGATE_KEYS = ("method", "train_cv_rmse_pct", "test_rmse_pct", "n_tasks", "n_test_obs")
FALLBACK_TASK = "<fallback>"


@dataclass
class TaskRow:
    task_key: str
    mode: str
    n_train: int
    n_test: int
    mean_log_duration: Optional[float]
    cv_rmse_pct: Optional[float]
    test_rmse_pct: Optional[float]
    cp_rmse_pct: Optional[float]
    n_fallback: int = 0


@dataclass
class AggregateRow:
    method: str
    train_cv_rmse_pct: Optional[float]
    test_rmse_pct: Optional[float]
    n_tasks: int
    n_test_obs: int


@dataclass
class EvaluationReport:
    mode: str
    tasks: list
    aggregates: list
    curves: dict = field(default_factory=dict)
    rule: Optional[dict] = None
    screening: dict = field(default_factory=dict)

    def aggregate(self, method: str) -> AggregateRow:
        for a in self.aggregates:
            if a.method == method:
                return a
        raise KeyError(method)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "tasks": [asdict(t) for t in self.tasks],
            "aggregates": [asdict(a) for a in self.aggregates],
            "curves": {k: [list(map(float, p)) for p in v] for k, v in self.curves.items()},
            "rule": self.rule,
            "screening": self.screening,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvaluationReport":
        return cls(
            mode=doc["mode"],
            tasks=[TaskRow(**t) for t in doc["tasks"]],
            aggregates=[AggregateRow(**a) for a in doc["aggregates"]],
            curves={k: [tuple(p) for p in v] for k, v in doc["curves"].items()},
            rule=doc.get("rule"),
            screening=doc.get("screening", {}),
        )


def pooled_rmse(rows: Sequence[TaskRow], attr: str, weight: str) -> Optional[float]:
    """Observation-weighted pooling of per-task RMSE values."""
    num = den = 0.0
    for r in rows:
        v = getattr(r, attr)
        w = getattr(r, weight)
        if v is None or w == 0:
            continue
        num += w * v * v
        den += w
    return math.sqrt(num / den) if den else None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(report: EvaluationReport, out_dir, formats=("csv", "json", "svg")) -> list:
    """Write ``tasks.csv``, ``aggregate.json``/``report.json`` and per-panel SVGs.

    Returns the written paths.
    """
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            p = out / "tasks.csv"
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(TASK_COLUMNS)
                for t in report.tasks:
                    w.writerow([_fmt(getattr(t, c)) for c in TASK_COLUMNS])
            written.append(p)
        if "json" in formats:
            p = out / "aggregate.json"
            p.write_text(json.dumps([asdict(a) for a in report.aggregates], indent=2) + "\n", encoding="utf-8")
            written.append(p)
            p = out / "report.json"
            p.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
            written.append(p)
        if "svg" in formats:
            for panel in ("train", "test"):
                p = out / f"{report.mode}_{panel}.svg"
                p.write_text(error_scatter_svg(report, panel), encoding="utf-8")
                written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write report to {exc.filename or out}: {exc.strerror}") from exc
    return written


def load_report(path) -> EvaluationReport:
    with open(path, encoding="utf-8") as fh:
        return EvaluationReport.from_dict(json.load(fh))
