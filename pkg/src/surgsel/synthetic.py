"""Synthetic surgery data with a planted sparse support, and a Monte Carlo risk oracle.

Each surgeon is one task. A record's log duration is

    surgeon intercept + operation-type effect + sum_s beta[surgeon, s] * x_s + N(0, sigma^2)

where the sum runs over the planted support. Coefficients are configured per
standard deviation of the covariate and converted to the raw scale, so that
a covariate's contribution to the response variance is ``beta_std ** 2``.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import truncnorm

from .data import REFERENCE_SCHEMA, CovariateSpec, Dataset, SurgeryRecord
from .errors import DataError

# Table-2 style frequencies of the training data (counts / 13,359 and friends).
ANESTHESIOLOGIST_PROBS = (5112 / 13359, 5679 / 13359, 2455 / 13359, 110 / 13359, 3 / 13359)
INDICATOR_PROBS = {
    "hypertension": 3908 / 13359,
    "ot_compl_bir": 994 / 13359,
    "diabetes_mellitus": 1762 / 13341,
}


@dataclass
class GeneratorConfig:
    n_surgeons: int = 40
    n_operation_types: int = 10
    task_size_min: int = 15
    task_size_max: int = 1052
    task_size_mean: float = 300.0
    task_sizes: Optional[list] = None
    type_concentration: float = 1.0
    support: tuple = ("age", "n_anesthesiologists", "surgeon_experience")
    coef_mean: Mapping[str, float] = field(
        default_factory=lambda: {"age": 0.1, "n_anesthesiologists": 0.15, "surgeon_experience": -0.1}
    )
    coef_sd: float = 0.02
    intercept_mean: float = 4.2
    intercept_sd: float = 0.15
    type_effect_sd: float = 0.3
    sigma: float = 0.3
    age_median: float = 53.0
    age_sd: float = 28.23
    age_halfwidth: float = 35.0
    anesthesiologist_probs: tuple = ANESTHESIOLOGIST_PROBS
    indicator_probs: Mapping[str, float] = field(default_factory=lambda: dict(INDICATOR_PROBS))
    experience_median: float = 437.0
    experience_log_sd: float = 1.05
    n_extra_covariates: int = 0
    start_date: str = "2010-01-01"
    end_date: str = "2020-05-31"
    seed: int = 0

    def __post_init__(self):
        self.support = tuple(self.support)
        self.anesthesiologist_probs = tuple(self.anesthesiologist_probs)
        self.validate()

    @property
    def covariate_names(self) -> tuple:
        return tuple(c.name for c in self.schema)

    @property
    def schema(self) -> tuple:
        extra = tuple(CovariateSpec(f"extra_{i + 1:02d}", "continuous") for i in range(self.n_extra_covariates))
        return REFERENCE_SCHEMA + extra

    def validate(self):
        if abs(sum(self.anesthesiologist_probs) - 1.0) > 1e-9:
            raise DataError("anesthesiologist probabilities must sum to 1")
        if any(p < 0 for p in self.anesthesiologist_probs):
            raise DataError("anesthesiologist probabilities must be nonnegative")
        for name, p in self.indicator_probs.items():
            if not 0.0 <= p <= 1.0:
                raise DataError(f"indicator probability for {name} outside [0, 1]")
        if not self.sigma >= 0:
            raise DataError("sigma must be nonnegative")
        if not self.support:
            raise DataError("support must be nonempty")
        unknown = [s for s in self.support if s not in self.covariate_names]
        if unknown:
            raise DataError(f"support covariates not generated: {unknown}")
        if self.n_surgeons < 1 or self.n_operation_types < 1:
            raise DataError("need at least one surgeon and one operation type")
        if not 1 <= self.task_size_min <= self.task_size_max:
            raise DataError("invalid task size bounds")
        if self.task_sizes is not None and len(self.task_sizes) != self.n_surgeons:
            raise DataError("task_sizes must list one size per surgeon")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["support"] = list(self.support)
        doc["anesthesiologist_probs"] = list(self.anesthesiologist_probs)
        doc["coef_mean"] = dict(self.coef_mean)
        doc["indicator_probs"] = dict(self.indicator_probs)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**doc)


def load_config(path) -> GeneratorConfig:
    with open(path, encoding="utf-8") as fh:
        return GeneratorConfig.from_dict(json.load(fh))


def covariate_moments(config: GeneratorConfig) -> dict:
    """Exact (mean, variance) of every generated covariate."""
    a = -config.age_halfwidth / config.age_sd
    age = truncnorm(a, -a, loc=config.age_median, scale=config.age_sd)
    probs = np.asarray(config.anesthesiologist_probs)
    k = np.arange(len(probs))
    an_mean = float(probs @ k)
    mu = math.log(config.experience_median)
    s2 = config.experience_log_sd**2
    out = {
        "age": (float(age.mean()), float(age.var())),
        "n_anesthesiologists": (an_mean, float(probs @ (k - an_mean) ** 2)),
        "surgeon_experience": (math.exp(mu + s2 / 2), (math.exp(s2) - 1) * math.exp(2 * mu + s2)),
    }
    for name in ("hypertension", "ot_compl_bir", "diabetes_mellitus"):
        p = config.indicator_probs[name]
        out[name] = (p, p * (1 - p))
    for i in range(config.n_extra_covariates):
        out[f"extra_{i + 1:02d}"] = (0.0, 1.0)
    return out


def sample_covariates(config: GeneratorConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` covariate rows in schema order."""
    cols = {}
    a = -config.age_halfwidth / config.age_sd
    cols["age"] = truncnorm.rvs(a, -a, loc=config.age_median, scale=config.age_sd, size=n, random_state=rng)
    cols["n_anesthesiologists"] = rng.choice(len(config.anesthesiologist_probs), size=n, p=config.anesthesiologist_probs).astype(float)
    for name in ("hypertension", "ot_compl_bir", "diabetes_mellitus"):
        cols[name] = (rng.random(n) < config.indicator_probs[name]).astype(float)
    cols["surgeon_experience"] = np.round(
        np.exp(math.log(config.experience_median) + config.experience_log_sd * rng.standard_normal(n))
    )
    for i in range(config.n_extra_covariates):
        cols[f"extra_{i + 1:02d}"] = rng.standard_normal(n)
    return np.column_stack([cols[c] for c in config.covariate_names]) if n else np.zeros((0, len(cols)))


def _task_sizes(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    if config.task_sizes is not None:
        return np.asarray(config.task_sizes, dtype=int)
    lo, hi = config.task_size_min, config.task_size_max
    p = 1.0 / max(config.task_size_mean - lo + 1.0, 1.0)
    sizes = np.empty(config.n_surgeons, dtype=int)
    for j in range(config.n_surgeons):
        while True:
            s = lo + rng.geometric(p) - 1
            if s <= hi:
                break
        sizes[j] = s
    return sizes


@dataclass(frozen=True)
class GroundTruth:
    """The law the generator sampled from; one task per surgeon."""

    config: GeneratorConfig
    surgeon_ids: tuple
    operation_type_ids: tuple
    sizes: np.ndarray
    intercepts: np.ndarray
    betas: np.ndarray  # (n_surgeons, n_covariates), raw scale, zero off-support
    type_effects: np.ndarray
    type_probs: np.ndarray  # (n_surgeons, n_operation_types)

    @property
    def sigma(self) -> float:
        return self.config.sigma

    @property
    def n_tasks(self) -> int:
        return len(self.surgeon_ids)

    @property
    def covariate_names(self) -> tuple:
        return self.config.covariate_names

    def mean_response(self, j: int, X: np.ndarray, types: np.ndarray) -> np.ndarray:
        return self.intercepts[j] + self.type_effects[types] + X @ self.betas[j]

    def sample_task(self, j: int, n: int, rng: np.random.Generator):
        """Fresh ``(X, type_index, y)`` of size ``n`` from task ``j``."""
        X = sample_covariates(self.config, n, rng)
        types = rng.choice(len(self.type_effects), size=n, p=self.type_probs[j])
        y = self.mean_response(j, X, types) + self.sigma * rng.standard_normal(n)
        return X, types, y

    def response_variance(self, j: int) -> float:
        """Var(y) within task ``j``: noise + covariate signal + type-mix spread."""
        moments = covariate_moments(self.config)
        var_x = np.array([moments[c][1] for c in self.covariate_names])
        p = self.type_probs[j]
        te = self.type_effects
        type_var = float(p @ te**2 - (p @ te) ** 2)
        return self.sigma**2 + float(self.betas[j] ** 2 @ var_x) + type_var


def draw_truth(config: GeneratorConfig, rng: np.random.Generator) -> GroundTruth:
    J, T = config.n_surgeons, config.n_operation_types
    names = config.covariate_names
    moments = covariate_moments(config)
    sizes = _task_sizes(config, rng)
    intercepts = config.intercept_mean + config.intercept_sd * rng.standard_normal(J)
    type_effects = config.type_effect_sd * rng.standard_normal(T)
    type_probs = rng.dirichlet(np.full(T, config.type_concentration), size=J) if T > 1 else np.ones((J, 1))
    betas = np.zeros((J, len(names)))
    for s in config.support:
        i = names.index(s)
        scale = math.sqrt(moments[s][1])
        per_sd = config.coef_mean.get(s, 0.0) + config.coef_sd * rng.standard_normal(J)
        betas[:, i] = per_sd / scale
    width = len(str(J))
    return GroundTruth(
        config=config,
        surgeon_ids=tuple(f"S{j + 1:0{max(2, width)}d}" for j in range(J)),
        operation_type_ids=tuple(f"OP{t + 1:03d}" for t in range(T)),
        sizes=sizes,
        intercepts=intercepts,
        betas=betas,
        type_effects=type_effects,
        type_probs=type_probs,
    )


def generate_dataset(config: GeneratorConfig):
    """Sample a dataset and return ``(Dataset, GroundTruth)``; deterministic in ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    truth = draw_truth(config, rng)
    start = dt.date.fromisoformat(config.start_date)
    span = (dt.date.fromisoformat(config.end_date) - start).days + 1
    names = config.covariate_names
    records = []
    counter = 0
    width = len(str(int(truth.sizes.sum())))
    for j, sid in enumerate(truth.surgeon_ids):
        X, types, y = truth.sample_task(j, int(truth.sizes[j]), rng)
        days = rng.integers(0, span, size=len(y))
        for row, t, v, d in zip(X, types, y, days):
            counter += 1
            records.append(
                SurgeryRecord(
                    record_id=f"R{counter:0{max(6, width)}d}",
                    surgeon_id=sid,
                    operation_type_id=truth.operation_type_ids[t],
                    duration_minutes=math.exp(v),
                    date=start + dt.timedelta(days=int(d)),
                    covariates=dict(zip(names, map(float, row))),
                )
            )
    return Dataset._trusted(records, config.schema), truth


# --------------------------------------------------------------------------
# Monte Carlo oracle
# --------------------------------------------------------------------------


def _oracle_design(X, types, cols, n_types, use_types, moments_mean, moments_sd):
    parts = [np.ones(X.shape[:-1] + (1,)), (X[..., cols] - moments_mean) / moments_sd]
    if use_types and n_types > 1:
        parts.append((types[..., None] == np.arange(1, n_types)).astype(float))
    return np.concatenate(parts, axis=-1)


def oracle_risk(
    truth: GroundTruth,
    model,
    n: int,
    mc_reps: int = 20_000,
    seed: int = 0,
    batch_size: Optional[int] = None,
):
    """Brute-force average prediction risk of ``model`` at sample size ``n``.

    For every replication and task a fresh training sample of size ``n`` and
    one fresh test point are drawn from the task's law; the model is fitted
    by least squares (normal equations, minimum-norm for absent type levels)
    and its squared prediction error recorded. Type dummies, when the model
    asks for them, cover every operation type of the law.

    Returns
    -------
    estimate : float
        Mean over replications of the task-averaged squared error.
    standard_error : float
    """
    if mc_reps < 1000:
        raise DataError(f"mc_reps must be at least 1000, got {mc_reps}")
    names = truth.covariate_names
    unknown = [s for s in model.subset if s not in names]
    if unknown:
        raise DataError(f"model covariates not in the generator schema: {unknown}")
    cols = [names.index(s) for s in model.subset]
    use_types = bool(model.include_within_task_categorical)
    T = len(truth.type_effects)
    d = 1 + len(cols) + (T - 1 if use_types and T > 1 else 0)
    if n <= d:
        raise DataError(f"sample size {n} must exceed model dimension {d}")
    moments = covariate_moments(truth.config)
    mm = np.array([moments[names[c]][0] for c in cols])
    ms = np.sqrt(np.array([moments[names[c]][1] for c in cols]))
    ms = np.where(ms > 0, ms, 1.0)

    if batch_size is None:
        batch_size = max(1, min(mc_reps, 2_000_000 // ((n + 1) * max(len(names), d))))
    starts = range(0, mc_reps, batch_size)
    seeds = np.random.SeedSequence(seed).spawn(len(starts))
    per_rep = np.zeros(mc_reps)
    for start, ss in zip(starts, seeds):
        B = min(batch_size, mc_reps - start)
        rng = np.random.default_rng(ss)
        acc = np.zeros(B)
        for j in range(truth.n_tasks):
            X, types, y = truth.sample_task(j, B * (n + 1), rng)
            X = X.reshape(B, n + 1, -1)
            types = types.reshape(B, n + 1)
            y = y.reshape(B, n + 1)
            D = _oracle_design(X, types, cols, T, use_types, mm, ms)
            Dt, yt = D[:, :n], y[:, :n]
            gram = np.einsum("bni,bnj->bij", Dt, Dt)
            rhs = np.einsum("bni,bn->bi", Dt, yt)
            coef = np.einsum("bij,bj->bi", np.linalg.pinv(gram, hermitian=True), rhs)
            pred = np.einsum("bi,bi->b", D[:, n], coef)
            acc += (y[:, n] - pred) ** 2
        per_rep[start : start + B] = acc / truth.n_tasks
    return float(per_rep.mean()), float(per_rep.std(ddof=1) / math.sqrt(mc_reps))
