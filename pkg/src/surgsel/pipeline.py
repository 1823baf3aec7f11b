"""End-to-end workflow: eligibility, screening, selection, fitting, evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import baselines as bl
from .data import (
    Dataset,
    TaskKey,
    TaskMode,
    eligibility_filter,
    partition_tasks,
)
from .errors import DataError
from .evaluation import (
    FALLBACK_TASK,
    AggregateRow,
    EvaluationReport,
    TaskRow,
    kernel_smooth,
    pooled_rmse,
    repeated_kfold,
    rmse_log,
)
from .screening import drift_screen, mutual_information_rank, residual_filter
from .selection import (
    MultiTaskFit,
    SelectionProblem,
    SelectionRule,
    all_subsets,
    build_selection_rule,
    cp_statistic,
    fit_multitask,
    predict_batch,
)

log = logging.getLogger(__name__)

DEFAULT_SEED = 20090512


@dataclass
class PipelineConfig:
    mode: str = "surgeon"
    k_filter: int = 6
    pool: Optional[Sequence[str]] = None
    surgeon_min: int = 100
    optype_min: int = 15
    min_task_size: Optional[int] = None
    cv_folds: int = 10
    cv_reps: int = 500
    baseline_cv_reps: int = 1
    min_test_per_task: Optional[int] = None
    baselines: Sequence[str] = ()
    mi_k: int = 200
    mi_bins: int = 10
    fs_k: int = 200
    lasso_folds: int = 10
    drift_threshold: float = 0.5
    seed: int = DEFAULT_SEED

    @property
    def task_mode(self) -> TaskMode:
        return TaskMode(self.mode)

    def test_threshold(self) -> int:
        if self.min_test_per_task is not None:
            return self.min_test_per_task
        return 10 if self.task_mode is TaskMode.INTERACTION else 1


def eligible_training(train: Dataset, cfg: PipelineConfig) -> Dataset:
    out = eligibility_filter(train, cfg.surgeon_min, cfg.optype_min)
    if len(out) == 0:
        raise DataError("no training records pass the eligibility thresholds")
    return out


def restrict_to_training_levels(test: Dataset, train: Dataset) -> Dataset:
    """Test records whose surgeon and operation type both occur in ``train``."""
    surgeons = set(train.surgeon_ids)
    types = set(train.operation_type_ids)
    keep = [i for i, r in enumerate(test.records) if r.surgeon_id in surgeons and r.operation_type_id in types]
    return test.subset(keep)


@dataclass
class Selection:
    problem: SelectionProblem
    rule: SelectionRule
    ranking: list
    pool: tuple

    def to_dict(self, cfg: PipelineConfig) -> dict:
        return {
            "mode": self.problem.partition.mode.value,
            "pool": list(self.pool),
            "ranking": [[n, s] for n, s in self.ranking],
            "surgeon_min": cfg.surgeon_min,
            "optype_min": cfg.optype_min,
            "min_task_size": cfg.min_task_size,
            "task_sizes": {k.label: int(n) for k, n in zip(self.problem.keys, self.problem.sizes)},
            "rule": self.rule.to_dict(),
        }


def choose_pool(train: Dataset, cfg: PipelineConfig):
    """Pool from the residual-correlation screen unless ``cfg.pool`` is set."""
    k = min(cfg.k_filter, len(train.covariate_names))
    ranking = residual_filter(train, k)
    pool = tuple(cfg.pool) if cfg.pool else tuple(n for n, _ in ranking)
    return pool, ranking


def select(train: Dataset, cfg: PipelineConfig) -> Selection:
    """Screen covariates, partition tasks and build the sample-size rule.

    ``train`` must already be eligibility-filtered.
    """
    pool, ranking = choose_pool(train, cfg)
    partition = partition_tasks(train, cfg.task_mode, cfg.min_task_size)
    problem = SelectionProblem(partition, pool)
    within = problem.config.within_field is not None
    rule = build_selection_rule(problem, all_subsets(pool, within))
    return Selection(problem, rule, ranking, pool)


def fit_from_rule(train: Dataset, rule_doc: Mapping) -> MultiTaskFit:
    """Refit task models for a rule document written by :meth:`Selection.to_dict`."""
    cfg = PipelineConfig(
        mode=rule_doc["mode"],
        surgeon_min=rule_doc.get("surgeon_min", 100),
        optype_min=rule_doc.get("optype_min", 15),
        min_task_size=rule_doc.get("min_task_size"),
    )
    train = eligible_training(train, cfg)
    partition = partition_tasks(train, cfg.task_mode, cfg.min_task_size)
    problem = SelectionProblem(partition, rule_doc["pool"])
    return fit_multitask(problem, SelectionRule.from_dict(rule_doc["rule"]))


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def _cp_curve(problem: SelectionProblem, rule: SelectionRule, points: int = 100) -> list:
    grid = np.unique(np.round(np.geomspace(rule.n_min, rule.n_max, points)).astype(int))
    return [(float(n), 100.0 * math.sqrt(cp_statistic(problem, rule.model_for(int(n)), int(n)).value)) for n in grid]


def _smooth(sizes, errors) -> list:
    try:
        q, s = kernel_smooth(sizes, errors)
    except DataError:
        return []
    return [(float(a), float(b)) for a, b in zip(q, s)]


def _test_rmse(pred: np.ndarray, actual: np.ndarray) -> Optional[float]:
    return rmse_log(pred, actual) if len(actual) else None


def evaluate(
    train: Dataset,
    test: Dataset,
    cfg: PipelineConfig,
    external: Optional[Mapping[str, float]] = None,
) -> EvaluationReport:
    """Select, fit and score the multi-task model and the requested baselines."""
    train_e = eligible_training(train, cfg)
    test_e = restrict_to_training_levels(test, train_e)
    sel = select(train_e, cfg)
    problem, rule = sel.problem, sel.rule
    flags = drift_screen(train_e, test_e, cfg.drift_threshold) if len(test_e) else []
    for name, smd in flags:
        if name in sel.pool:
            log.warning("covariate %s shifts between train and test (standardized difference %.2f)", name, smd)

    glob = bl.fit_global(train_e, sel.pool)
    mt = fit_multitask(problem, rule, fallback=glob)
    mode = problem.partition.mode

    pred, fb = predict_batch(mt, test_e)
    actual = test_e.log_durations
    keys = [TaskKey.for_record(mode, r) for r in test_e.records]
    by_task = {}
    for i, k in enumerate(keys):
        by_task.setdefault(k, []).append(i)

    threshold = cfg.test_threshold()
    rows = []
    scored = []
    for j, b in enumerate(problem.blocks):
        task = mt.tasks[b.key]
        X = task.predictor.encoder.transform(b.data)
        k = min(cfg.cv_folds, b.n)
        cv = 100.0 * math.sqrt(repeated_kfold(X, b.y, k, cfg.cv_reps, seed=[cfg.seed, j]))
        idx = by_task.get(b.key, [])
        reported = len(idx) >= threshold
        if reported:
            scored.extend(idx)
        rows.append(
            TaskRow(
                task_key=b.key.label,
                mode=mode.value,
                n_train=b.n,
                n_test=len(idx),
                mean_log_duration=float(b.data.log_durations.mean()),
                cv_rmse_pct=cv,
                test_rmse_pct=_test_rmse(pred[idx], actual[idx]) if reported and idx else None,
                cp_rmse_pct=100.0 * math.sqrt(cp_statistic(problem, task.model, b.n).value),
                n_fallback=0,
            )
        )
    fb_idx = np.flatnonzero(fb).tolist()
    if fb_idx and mode is not TaskMode.INTERACTION:
        scored.extend(fb_idx)
        rows.append(
            TaskRow(FALLBACK_TASK, mode.value, 0, len(fb_idx), None, None, _test_rmse(pred[fb_idx], actual[fb_idx]), None, len(fb_idx))
        )
    scored = np.array(sorted(scored), dtype=int)
    scored_data = test_e.subset(scored)
    y_scored = actual[scored]

    aggregates = [
        AggregateRow(
            "multitask",
            pooled_rmse(rows, "cv_rmse_pct", "n_train"),
            _test_rmse(pred[scored], y_scored),
            problem.n_tasks,
            len(scored),
        )
    ]

    def add(method, cv_mse, test_pred):
        aggregates.append(
            AggregateRow(
                method,
                None if cv_mse is None else 100.0 * math.sqrt(cv_mse),
                _test_rmse(test_pred, y_scored),
                problem.n_tasks,
                len(scored),
            )
        )

    def global_cv(model):
        X = model.predictor.encoder.transform(train_e)
        return repeated_kfold(X, train_e.log_durations, min(cfg.cv_folds, len(train_e)), cfg.baseline_cv_reps, seed=[cfg.seed, 10**6])

    add("global", global_cv(glob), glob.predict(scored_data))
    requested = [b.strip().lower() for b in cfg.baselines if b.strip()]
    for name in requested:
        if name == "global":
            continue
        if name == "lasso":
            res = bl.lasso_fit(train_e, "auto", cfg.lasso_folds, cfg.seed)
            add("lasso", float(res.cv_mse[res.best_index]), res.predict(scored_data))
        elif name == "mi":
            chosen = [n for n, _ in mutual_information_rank(train_e, cfg.mi_k, cfg.mi_bins)]
            m = bl.refit_global_on(train_e, chosen)
            add("mi", global_cv(m), m.predict(scored_data))
        elif name == "fs":
            names = train_e.covariate_names
            chosen = bl.forward_select(train_e, names, min(cfg.fs_k, len(names)))
            m = bl.refit_global_on(train_e, chosen)
            add("fs", global_cv(m), m.predict(scored_data))
        else:
            raise DataError(f"unknown baseline {name!r}")
    if external is not None:
        missing = [rid for rid in scored_data.record_ids if rid not in external]
        if missing:
            raise DataError(f"external predictions missing for {len(missing)} test records, e.g. {missing[0]!r}")
        add("external", None, np.array([external[rid] for rid in scored_data.record_ids]))

    train_pts = [(r.n_train, r.cv_rmse_pct) for r in rows if r.cv_rmse_pct is not None and r.n_train]
    test_pts = [(r.n_train, r.test_rmse_pct) for r in rows if r.test_rmse_pct is not None and r.n_train]
    curves = {
        "cp": _cp_curve(problem, rule),
        "smooth_train": _smooth(*zip(*train_pts)) if len(train_pts) >= 2 else [],
        "smooth_test": _smooth(*zip(*test_pts)) if len(test_pts) >= 2 else [],
    }
    return EvaluationReport(
        mode=mode.value,
        tasks=rows,
        aggregates=aggregates,
        curves=curves,
        rule=sel.rule.to_dict(),
        screening={
            "ranking": [[n, s] for n, s in sel.ranking],
            "pool": list(sel.pool),
            "drift_flags": [[n, s if math.isfinite(s) else None] for n, s in flags],
        },
    )
