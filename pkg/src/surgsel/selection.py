"""Sample-size-dependent covariate selection shared across regression tasks.

Every task ``j`` gets its own least-squares fit, but the covariate subset is
a function of the task's sample size only. For a candidate model ``p`` the
average prediction error at sample size ``n`` is estimated by

    C_j(n) = RSS_j / n_j + s2_j * d_j / n_j + s2_j * d_j / n
    C(n)   = mean over tasks of C_j(n)

where ``RSS_j`` and ``d_j`` (the fitted rank, counting the intercept and any
within-task dummies) come from fitting ``p`` to task ``j``, and ``s2_j`` is
the residual variance of the task's largest admissible model. The first two
terms estimate the task's error floor plus misfit; the last is the variance
of estimating ``d_j`` coefficients from ``n`` observations. With one task and
``n = n_j`` this is Mallows' Cp divided by ``n``.

The selection rule evaluates ``argmin_p C(n)`` on an integer grid and stores
the result as contiguous sample-size ranges.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .baselines import GlobalModel, fit_global
from .data import (
    CovariateSpec,
    Dataset,
    DesignEncoder,
    LinearPredictor,
    SurgeryRecord,
    TaskKey,
    TaskMode,
    TaskPartition,
    build_encoder,
    center_by_operation_type,
)
from .errors import DataError
from .ols import DesignMatrix, fit_ols

MAX_POOL_FOR_ENUMERATION = 12
SIGMA2_SPARE_DOF = 5


@dataclass(frozen=True)
class ModeConfig:
    """How tasks of one partition mode are modelled.

    ``within_field`` is the categorical expanded inside each task (levels
    need at least ``within_min_count`` task records); ``center_response``
    subtracts operation-type training means from the response.
    """

    center_response: bool
    within_field: Optional[str]
    within_min_count: int = 11


MODE_CONFIGS = {
    TaskMode.SURGEON: ModeConfig(True, "operation_type_id", 11),
    TaskMode.OPTYPE: ModeConfig(False, "surgeon_id", 11),
    TaskMode.INTERACTION: ModeConfig(False, None, 11),
}


@dataclass(frozen=True)
class CandidateModel:
    subset: tuple = ()
    include_within_task_categorical: bool = False

    def __post_init__(self):
        subset = tuple(sorted(set(self.subset)))
        object.__setattr__(self, "subset", subset)

    @property
    def size(self) -> int:
        return len(self.subset)

    def sort_key(self):
        return (len(self.subset), self.subset)

    def label(self) -> str:
        return "{" + ", ".join(self.subset) + "}"

    def to_dict(self) -> dict:
        return {"subset": list(self.subset), "within_task_categorical": self.include_within_task_categorical}

    @classmethod
    def from_dict(cls, doc) -> "CandidateModel":
        return cls(tuple(doc["subset"]), bool(doc["within_task_categorical"]))


def all_subsets(pool: Sequence[str], within_task_categorical: bool = False) -> list:
    """Every subset of ``pool`` (including the empty one) as candidates."""
    if len(pool) > MAX_POOL_FOR_ENUMERATION:
        raise DataError(f"pool of {len(pool)} covariates is too large to enumerate (max {MAX_POOL_FOR_ENUMERATION})")
    out = []
    for r in range(len(pool) + 1):
        for combo in itertools.combinations(pool, r):
            out.append(CandidateModel(combo, within_task_categorical))
    return out


@dataclass(frozen=True)
class CpEstimate:
    model: CandidateModel
    n: int
    value: float
    per_task_values: Mapping[TaskKey, float]


# --------------------------------------------------------------------------
# per-task variance plug-in
# --------------------------------------------------------------------------


def _sigma2_blocks(y: np.ndarray, pool_block: np.ndarray, dummy_block: np.ndarray):
    """Residual variance of the largest admissible model; returns (s2, rank)."""
    n = len(y)
    k_pool = pool_block.shape[1]
    k_dum = dummy_block.shape[1]

    def fit(kp, kd):
        X = np.hstack([np.ones((n, 1)), pool_block[:, :kp], dummy_block[:, :kd]])
        f = fit_ols(DesignMatrix(X, [f"c{i}" for i in range(X.shape[1])]), y)
        return f.rss, f.effective_rank

    rss, rank = fit(k_pool, k_dum)
    if n > rank:
        return rss / (n - rank), rank
    # drop last-ranked pool covariates first, then the rarest dummies
    schedule = [(kp, k_dum) for kp in range(k_pool - 1, -1, -1)]
    schedule += [(0, kd) for kd in range(k_dum - 1, -1, -1)]
    for kp, kd in schedule:
        rss, rank = fit(kp, kd)
        if n > rank + SIGMA2_SPARE_DOF:
            return rss / (n - rank), rank
    raise DataError(f"task with {n} records is too small to estimate the noise variance")


def sigma2_full(
    task: Dataset,
    pool: Sequence[str],
    within_task_categorical: bool = False,
    response: Optional[np.ndarray] = None,
    within_field: str = "operation_type_id",
    within_min_count: int = 11,
) -> float:
    """Noise-variance estimate ``RSS_full / (n - d_full)`` for one task.

    The full model is intercept + ``pool`` (+ within-task dummies). If it
    leaves no residual degrees of freedom, covariates are removed from the
    end of ``pool`` until at least ``SIGMA2_SPARE_DOF + 1`` remain.
    """
    y = task.log_durations if response is None else np.asarray(response, dtype=float)
    pool_block = task.covariate_matrix(pool)
    dummy_block = np.zeros((len(task), 0))
    if within_task_categorical:
        enc = build_encoder(task, (), [(within_field, within_min_count)], include_intercept=False)
        if enc.n_columns:
            dummy_block = enc.transform(task).values
    return _sigma2_blocks(y, pool_block, dummy_block)[0]


# --------------------------------------------------------------------------
# problem: a partition prepared for repeated candidate evaluation
# --------------------------------------------------------------------------


@dataclass
class _TaskBlocks:
    key: TaskKey
    data: Dataset
    y: np.ndarray
    pool_block: np.ndarray
    within: Optional[DesignEncoder]
    dummy_block: np.ndarray

    @property
    def n(self) -> int:
        return len(self.y)


class SelectionProblem:
    """A task partition plus covariate pool, with per-candidate fits cached.

    Parameters
    ----------
    partition : TaskPartition
    pool : sequence of str
        Candidate covariates, most important first (the order used when the
        variance plug-in must shrink the full model).
    center_response : bool, optional
        Defaults to the partition mode's setting.
    """

    def __init__(self, partition: TaskPartition, pool: Sequence[str], center_response: Optional[bool] = None):
        self.partition = partition
        self.pool = tuple(pool)
        self.config = MODE_CONFIGS[partition.mode]
        self.center_response = self.config.center_response if center_response is None else center_response
        data = partition.dataset
        unknown = [p for p in self.pool if p not in data.covariate_names]
        if unknown:
            raise DataError(f"pool covariates not in schema: {unknown}")
        y_all = data.log_durations
        self.type_means = {}
        self.global_mean = float(y_all.mean())
        if self.center_response:
            _, self.type_means = center_by_operation_type(data)
            y_all = y_all - np.array([self.type_means[t] for t in data.operation_type_ids])
        self.response = y_all
        X_pool = data.covariate_matrix(self.pool)
        self.blocks = []
        for key, idx in partition.tasks.items():
            task = data.subset(idx)
            within = None
            dummy = np.zeros((len(idx), 0))
            if self.config.within_field is not None:
                within = build_encoder(
                    task, (), [(self.config.within_field, self.config.within_min_count)], include_intercept=False
                )
                if within.n_columns:
                    dummy = within.transform(task).values
            self.blocks.append(_TaskBlocks(key, task, y_all[idx], X_pool[idx], within, dummy))
        self.keys = tuple(b.key for b in self.blocks)
        self.sizes = np.array([b.n for b in self.blocks])
        self._sigma2 = {}
        self._scores = {}

    @property
    def n_tasks(self) -> int:
        return len(self.blocks)

    def default_grid(self) -> range:
        return range(int(self.sizes.min()), int(self.sizes.max()) + 1)

    def sigma2(self, within_task_categorical: bool) -> np.ndarray:
        flag = bool(within_task_categorical) and self.config.within_field is not None
        if flag not in self._sigma2:
            vals = []
            for b in self.blocks:
                dummy = b.dummy_block if flag else b.dummy_block[:, :0]
                try:
                    vals.append(_sigma2_blocks(b.y, b.pool_block, dummy)[0])
                except DataError as exc:
                    raise DataError(f"task {b.key}: {exc}") from None
            self._sigma2[flag] = np.array(vals)
        return self._sigma2[flag]

    def design(self, block: _TaskBlocks, model: CandidateModel) -> DesignMatrix:
        cols = [self.pool.index(s) for s in model.subset] if model.subset else []
        unknown = [s for s in model.subset if s not in self.pool]
        if unknown:
            raise DataError(f"candidate covariates outside the pool: {unknown}")
        parts = [np.ones((block.n, 1)), block.pool_block[:, cols]]
        names = ["intercept"] + list(model.subset)
        if model.include_within_task_categorical and block.within is not None:
            parts.append(block.dummy_block)
            names += list(block.within.column_names)
        return DesignMatrix(np.hstack(parts), names, True)

    def scores(self, model: CandidateModel):
        """Per-task (rss, rank) arrays for ``model``, cached."""
        if model not in self._scores:
            rss = np.empty(self.n_tasks)
            rank = np.empty(self.n_tasks)
            for j, b in enumerate(self.blocks):
                f = fit_ols(self.design(b, model), b.y)
                rss[j] = f.rss
                rank[j] = f.effective_rank
            self._scores[model] = (rss, rank)
        return self._scores[model]

    def violations(self, model: CandidateModel) -> list:
        _, rank = self.scores(model)
        return [self.keys[j] for j in np.flatnonzero(self.sizes <= rank)]

    def per_task_cp(self, model: CandidateModel, n) -> np.ndarray:
        rss, d = self.scores(model)
        s2 = self.sigma2(model.include_within_task_categorical)
        nj = self.sizes
        return rss / nj + s2 * d / nj + s2 * d / n


def cp_statistic(problem: SelectionProblem, model: CandidateModel, n: int) -> CpEstimate:
    """Estimated average prediction error of ``model`` at common sample size ``n``."""
    if n < 1:
        raise DataError(f"sample size must be positive, got {n}")
    bad = problem.violations(model)
    if bad:
        raise DataError(f"model {model.label()} has at least as many parameters as records in task {bad[0]}")
    per_task = problem.per_task_cp(model, n)
    value = float(per_task.sum() / problem.n_tasks)
    return CpEstimate(model, int(n), value, dict(zip(problem.keys, map(float, per_task))))


def _admissible(problem: SelectionProblem, candidates: Iterable[CandidateModel]) -> list:
    ok = []
    for c in dict.fromkeys(candidates):
        bad = problem.violations(c)
        if bad:
            warnings.warn(f"skipping {c.label()}: too many parameters for task {bad[0]}", stacklevel=3)
        else:
            ok.append(c)
    if not ok:
        raise DataError("no candidate model can be fitted in every task")
    return sorted(ok, key=CandidateModel.sort_key)


def _argmin(values: np.ndarray) -> int:
    # candidates are pre-sorted by (size, names), so the first minimum wins ties
    return int(np.argmin(values))


def best_subset_for_n(problem: SelectionProblem, candidates: Sequence[CandidateModel], n: int) -> CandidateModel:
    """Candidate minimizing the estimated prediction error at sample size ``n``.

    Ties go to the smaller subset, then the lexicographically first one.
    """
    cands = _admissible(problem, candidates)
    values = np.array([cp_statistic(problem, c, n).value for c in cands])
    return cands[_argmin(values)]


@dataclass(frozen=True)
class RuleRange:
    n_low: int
    n_high: int
    model: CandidateModel


@dataclass(frozen=True)
class SelectionRule:
    """Step function from task sample size to covariate subset."""

    ranges: tuple

    def __post_init__(self):
        ranges = tuple(self.ranges)
        if not ranges:
            raise DataError("selection rule needs at least one range")
        for a, b in zip(ranges, ranges[1:]):
            if b.n_low != a.n_high + 1:
                raise DataError("selection rule ranges must be contiguous and sorted")
        for r in ranges:
            if r.n_low > r.n_high:
                raise DataError(f"empty range {r.n_low}..{r.n_high}")
        object.__setattr__(self, "ranges", ranges)

    @property
    def n_min(self) -> int:
        return self.ranges[0].n_low

    @property
    def n_max(self) -> int:
        return self.ranges[-1].n_high

    def covers(self, n: int) -> bool:
        return self.n_min <= n <= self.n_max

    def model_for(self, n: int) -> CandidateModel:
        for r in self.ranges:
            if r.n_low <= n <= r.n_high:
                return r.model
        raise KeyError(f"sample size {n} outside rule range {self.n_min}..{self.n_max}")

    def is_nested(self) -> bool:
        return all(set(a.model.subset) <= set(b.model.subset) for a, b in zip(self.ranges, self.ranges[1:]))

    def sizes_nondecreasing(self) -> bool:
        return all(a.model.size <= b.model.size for a, b in zip(self.ranges, self.ranges[1:]))

    def covariates_used(self) -> set:
        return set().union(*(r.model.subset for r in self.ranges))

    def to_dict(self) -> dict:
        return {"ranges": [{"n_low": r.n_low, "n_high": r.n_high, **r.model.to_dict()} for r in self.ranges]}

    @classmethod
    def from_dict(cls, doc) -> "SelectionRule":
        return cls(tuple(RuleRange(int(r["n_low"]), int(r["n_high"]), CandidateModel.from_dict(r)) for r in doc["ranges"]))

    def describe(self) -> str:
        return "\n".join(f"{r.n_low:>6} <= n <= {r.n_high:<6} {r.model.label()}" for r in self.ranges)


def build_selection_rule(
    problem: SelectionProblem,
    candidates: Sequence[CandidateModel],
    n_grid: Optional[Sequence[int]] = None,
) -> SelectionRule:
    """Winner at every integer ``n`` of the grid, compressed into ranges."""
    grid = problem.default_grid() if n_grid is None else n_grid
    grid = np.asarray(list(grid), dtype=int)
    if grid.size == 0 or np.any(np.diff(grid) != 1):
        raise DataError("n_grid must be a nonempty range of consecutive integers")
    if grid[0] > problem.sizes.min() or grid[-1] < problem.sizes.max():
        raise DataError(f"n_grid {grid[0]}..{grid[-1]} does not cover task sizes {problem.sizes.min()}..{problem.sizes.max()}")
    cands = _admissible(problem, candidates)
    ranges = []
    for n in grid:
        values = np.array([problem.per_task_cp(c, n).sum() / problem.n_tasks for c in cands])
        winner = cands[_argmin(values)]
        if ranges and ranges[-1][2] == winner:
            ranges[-1][1] = int(n)
        else:
            ranges.append([int(n), int(n), winner])
    return SelectionRule(tuple(RuleRange(lo, hi, m) for lo, hi, m in ranges))


# --------------------------------------------------------------------------
# fitted multi-task model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskModel:
    key: TaskKey
    n: int
    model: CandidateModel
    predictor: LinearPredictor
    sigma2: float
    fit: Optional[object] = field(default=None, compare=False)
    training_predictions: Mapping[str, float] = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class Prediction:
    value: float
    fallback: bool


@dataclass(frozen=True)
class MultiTaskFit:
    mode: TaskMode
    rule: SelectionRule
    pool: tuple
    center_response: bool
    tasks: Mapping[TaskKey, TaskModel]
    type_means: Mapping[str, float]
    global_mean: float
    fallback: LinearPredictor

    def offset(self, operation_type_id: str) -> float:
        if not self.center_response:
            return 0.0
        return self.type_means.get(operation_type_id, self.global_mean)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "pool": list(self.pool),
            "center_response": self.center_response,
            "rule": self.rule.to_dict(),
            "type_means": dict(self.type_means),
            "global_mean": self.global_mean,
            "fallback": self.fallback.to_dict(),
            "tasks": [
                {
                    "task_key": t.key.label,
                    "n": t.n,
                    **t.model.to_dict(),
                    "sigma2": t.sigma2,
                    **t.predictor.to_dict(),
                    "training_predictions": dict(t.training_predictions),
                }
                for t in self.tasks.values()
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MultiTaskFit":
        mode = TaskMode(doc["mode"])
        tasks = {}
        for t in doc["tasks"]:
            key = TaskKey.from_label(mode, t["task_key"])
            tasks[key] = TaskModel(
                key=key,
                n=int(t["n"]),
                model=CandidateModel.from_dict(t),
                predictor=LinearPredictor.from_dict(t),
                sigma2=float(t["sigma2"]),
                training_predictions=dict(t.get("training_predictions", {})),
            )
        return cls(
            mode=mode,
            rule=SelectionRule.from_dict(doc["rule"]),
            pool=tuple(doc["pool"]),
            center_response=bool(doc["center_response"]),
            tasks=tasks,
            type_means=dict(doc["type_means"]),
            global_mean=float(doc["global_mean"]),
            fallback=LinearPredictor.from_dict(doc["fallback"]),
        )


def fit_multitask(
    problem: SelectionProblem,
    rule: SelectionRule,
    fallback: Optional[GlobalModel] = None,
) -> MultiTaskFit:
    """Fit every task with the subset the rule assigns to its sample size.

    ``fallback`` scores records of unseen tasks; by default a global model
    on the pool covariates is fitted to the partition's dataset.
    """
    tasks = {}
    s2_cache = {}
    for j, b in enumerate(problem.blocks):
        if not rule.covers(b.n):
            raise DataError(f"rule does not cover task {b.key} (n={b.n})")
        model = rule.model_for(b.n)
        cats = []
        if model.include_within_task_categorical and problem.config.within_field is not None:
            cats = [(problem.config.within_field, problem.config.within_min_count)]
        enc = build_encoder(b.data, model.subset, cats, include_intercept=True)
        X = enc.transform(b.data)
        f = fit_ols(X, b.y)
        if b.n <= f.effective_rank:
            raise DataError(f"task {b.key}: {b.n} records for {f.effective_rank} parameters")
        flag = model.include_within_task_categorical
        if flag not in s2_cache:
            s2_cache[flag] = problem.sigma2(flag)
        fitted = f.fitted_values
        if problem.center_response:
            fitted = fitted + np.array([problem.type_means[t] for t in b.data.operation_type_ids])
        tasks[b.key] = TaskModel(
            key=b.key,
            n=b.n,
            model=model,
            predictor=LinearPredictor(enc, tuple(f.coefficients)),
            sigma2=float(s2_cache[flag][j]),
            fit=f,
            training_predictions=dict(zip(b.data.record_ids, map(float, fitted))),
        )
    if fallback is None:
        fallback = fit_global(problem.partition.dataset, problem.pool)
    return MultiTaskFit(
        mode=problem.partition.mode,
        rule=rule,
        pool=problem.pool,
        center_response=problem.center_response,
        tasks=tasks,
        type_means=dict(problem.type_means),
        global_mean=problem.global_mean,
        fallback=fallback.predictor,
    )


def predict_multitask(fit: MultiTaskFit, record: SurgeryRecord, schema=None) -> Prediction:
    """Predicted log duration for one record; unseen tasks use the fallback model."""
    if schema is None:
        schema = tuple(_schema_for(record))
    values, fallback = predict_batch(fit, Dataset._trusted([record], schema))
    return Prediction(float(values[0]), bool(fallback[0]))


def _schema_for(record: SurgeryRecord):
    return [CovariateSpec(name, "continuous") for name in record.covariates]


def predict_batch(fit: MultiTaskFit, data: Dataset):
    """Vectorized :func:`predict_multitask`; returns (values, fallback_mask)."""
    n = len(data)
    values = np.zeros(n)
    fallback = np.zeros(n, dtype=bool)
    groups = {}
    for i, rec in enumerate(data.records):
        groups.setdefault(TaskKey.for_record(fit.mode, rec), []).append(i)
    for key, idx in groups.items():
        sub = data.subset(idx)
        task = fit.tasks.get(key)
        if task is None:
            values[idx] = fit.fallback.predict(sub)
            fallback[idx] = True
        else:
            values[idx] = task.predictor.predict(sub) + np.array([fit.offset(t) for t in sub.operation_type_ids])
    return values, fallback
