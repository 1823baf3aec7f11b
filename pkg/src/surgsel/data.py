"""Surgery records, CSV input/output, splitting, task partitions and design encoding."""

from __future__ import annotations

import csv
import datetime as dt
import enum
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DataError
from .ols import DesignMatrix

REQUIRED_COLUMNS = ("record_id", "surgeon_id", "operation_type_id", "duration_minutes", "date")
COVARIATE_KINDS = ("count", "continuous", "indicator")


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = "continuous"

    def __post_init__(self):
        if self.kind not in COVARIATE_KINDS:
            raise DataError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        if self.name in REQUIRED_COLUMNS:
            raise DataError(f"covariate name {self.name!r} clashes with a required column")


# The six covariates kept by the residual-correlation screen on the hospital data.
REFERENCE_SCHEMA = (
    CovariateSpec("age", "continuous"),
    CovariateSpec("n_anesthesiologists", "count"),
    CovariateSpec("hypertension", "indicator"),
    CovariateSpec("ot_compl_bir", "indicator"),
    CovariateSpec("diabetes_mellitus", "indicator"),
    CovariateSpec("surgeon_experience", "count"),
)


@dataclass(frozen=True)
class SurgeryRecord:
    record_id: str
    surgeon_id: str
    operation_type_id: str
    duration_minutes: float
    date: dt.date
    covariates: Mapping[str, float] = field(default_factory=dict)
    log_duration: float = field(init=False)

    def __post_init__(self):
        d = float(self.duration_minutes)
        if not (math.isfinite(d) and d > 0):
            raise DataError(f"record {self.record_id}: duration_minutes must be positive and finite, got {d}")
        object.__setattr__(self, "duration_minutes", d)
        object.__setattr__(self, "log_duration", math.log(d))


class Dataset:
    """Immutable collection of records sharing one covariate schema."""

    def __init__(self, records: Iterable[SurgeryRecord], schema: Sequence[CovariateSpec]):
        self.records = tuple(records)
        self.schema = tuple(schema)
        self._validate()

    @classmethod
    def _trusted(cls, records, schema) -> "Dataset":
        obj = cls.__new__(cls)
        obj.records = tuple(records)
        obj.schema = tuple(schema)
        return obj

    def _validate(self):
        names = [c.name for c in self.schema]
        if len(set(names)) != len(names):
            raise DataError("duplicate covariate names in schema")
        seen = set()
        for i, rec in enumerate(self.records):
            if rec.record_id in seen:
                raise DataError(f"duplicate record_id {rec.record_id!r}")
            seen.add(rec.record_id)
            if set(rec.covariates) != set(names):
                raise DataError(f"record {rec.record_id!r} does not match the covariate schema")
            for spec in self.schema:
                v = rec.covariates[spec.name]
                if not math.isfinite(v):
                    raise DataError(f"record {rec.record_id!r}, column {spec.name}: non-finite value")
                if spec.kind == "indicator" and v not in (0.0, 1.0):
                    raise DataError(f"record {rec.record_id!r}, column {spec.name}: indicator must be 0 or 1")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __repr__(self):
        return f"Dataset(n={len(self)}, covariates={list(self.covariate_names)})"

    @property
    def covariate_names(self) -> tuple:
        return tuple(c.name for c in self.schema)

    def kind(self, name: str) -> str:
        for c in self.schema:
            if c.name == name:
                return c.kind
        raise DataError(f"unknown covariate {name!r}")

    def subset(self, indices) -> "Dataset":
        recs = self.records
        return Dataset._trusted([recs[i] for i in indices], self.schema)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.schema != self.schema:
            raise DataError("cannot concatenate datasets with different schemas")
        return Dataset(self.records + other.records, self.schema)

    @cached_property
    def log_durations(self) -> np.ndarray:
        return np.array([r.log_duration for r in self.records], dtype=float)

    @cached_property
    def surgeon_ids(self) -> tuple:
        return tuple(r.surgeon_id for r in self.records)

    @cached_property
    def operation_type_ids(self) -> tuple:
        return tuple(r.operation_type_id for r in self.records)

    @cached_property
    def record_ids(self) -> tuple:
        return tuple(r.record_id for r in self.records)

    @cached_property
    def covariate_array(self) -> np.ndarray:
        """Covariates in schema order, shape (n, k)."""
        names = self.covariate_names
        arr = np.array([[r.covariates[c] for c in names] for r in self.records], dtype=float)
        return arr.reshape(len(self.records), len(names))

    def covariate_matrix(self, names: Sequence[str]) -> np.ndarray:
        cols = self.covariate_names
        try:
            idx = [cols.index(n) for n in names]
        except ValueError as exc:
            raise DataError(f"unknown covariate in {list(names)}") from exc
        return self.covariate_array[:, idx]

    def labels(self, field_name: str) -> tuple:
        if field_name == "surgeon_id":
            return self.surgeon_ids
        if field_name == "operation_type_id":
            return self.operation_type_ids
        raise DataError(f"{field_name!r} is not a categorical field")


# --------------------------------------------------------------------------
# schema and CSV
# --------------------------------------------------------------------------


def load_schema(path) -> tuple:
    """Read a covariate schema from JSON.

    Accepts ``{"covariates": [{"name": ..., "kind": ...}, ...]}`` or the
    mapping form ``{"covariates": {"age": "continuous", ...}}``.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return schema_from_dict(doc)


def schema_from_dict(doc) -> tuple:
    items = doc.get("covariates", doc) if isinstance(doc, dict) else doc
    if isinstance(items, dict):
        return tuple(CovariateSpec(k, v) for k, v in items.items())
    return tuple(CovariateSpec(it["name"], it.get("kind", "continuous")) for it in items)


def schema_to_dict(schema: Sequence[CovariateSpec]) -> dict:
    return {"covariates": [{"name": c.name, "kind": c.kind} for c in schema]}


def _infer_kind(values: Sequence[str]) -> str:
    try:
        nums = [float(v) for v in values]
    except ValueError:
        return "continuous"
    if nums and all(v in (0.0, 1.0) for v in nums):
        return "indicator"
    if nums and all(v.is_integer() and v >= 0 for v in nums):
        return "count"
    return "continuous"


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def ingest_csv(path, schema: Optional[Sequence[CovariateSpec]] = None) -> Dataset:
    """Load a dataset from CSV.

    Without ``schema`` every non-required column becomes a covariate and its
    kind is inferred from the values.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise DataError(f"{path}: empty file, header row required")
        rows = list(reader)
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if schema is None:
        extra = [c for c in header if c not in REQUIRED_COLUMNS]
        schema = tuple(CovariateSpec(c, _infer_kind([r[c] for r in rows])) for c in extra)
    else:
        schema = tuple(schema)
        missing += [c.name for c in schema if c.name not in header]
    if missing:
        raise DataError(f"{path}: missing required column(s) {missing}")

    records = []
    seen = set()
    for i, row in enumerate(rows, start=1):
        where = f"{path}: row {i}"
        rid = row["record_id"]
        if rid in seen:
            raise DataError(f"{where}, column record_id: duplicate record_id {rid!r}")
        seen.add(rid)
        try:
            duration = float(row["duration_minutes"])
        except (TypeError, ValueError):
            raise DataError(f"{where}, column duration_minutes: not a number: {row['duration_minutes']!r}") from None
        if not (math.isfinite(duration) and duration > 0):
            raise DataError(f"{where}, column duration_minutes: must be positive, got {row['duration_minutes']!r}")
        try:
            date = _parse_date(row["date"])
        except (TypeError, ValueError):
            raise DataError(f"{where}, column date: unparseable date {row['date']!r}") from None
        covs = {}
        for spec in schema:
            raw = row[spec.name]
            try:
                v = float(raw)
            except (TypeError, ValueError):
                raise DataError(f"{where}, column {spec.name}: not a number: {raw!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{where}, column {spec.name}: non-finite value {raw!r}")
            if spec.kind == "indicator" and v not in (0.0, 1.0):
                raise DataError(f"{where}, column {spec.name}: indicator must be 0 or 1, got {raw!r}")
            covs[spec.name] = v
        records.append(SurgeryRecord(rid, row["surgeon_id"], row["operation_type_id"], duration, date, covs))
    return Dataset._trusted(records, schema)


def _format_value(v: float, kind: str) -> str:
    if kind != "continuous" and float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def write_csv(data: Dataset, path) -> None:
    names = data.covariate_names
    kinds = [c.kind for c in data.schema]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS + names)
        for r in data.records:
            w.writerow(
                [r.record_id, r.surgeon_id, r.operation_type_id, repr(r.duration_minutes), r.date.isoformat()]
                + [_format_value(r.covariates[n], k) for n, k in zip(names, kinds)]
            )


# --------------------------------------------------------------------------
# splitting and filtering
# --------------------------------------------------------------------------


def temporal_split(d: Dataset, cutoff) -> tuple:
    """Split into records dated before ``cutoff`` and on/after it."""
    if isinstance(cutoff, str):
        cutoff = _parse_date(cutoff)
    train = [r for r in d.records if r.date < cutoff]
    test = [r for r in d.records if r.date >= cutoff]
    return Dataset._trusted(train, d.schema), Dataset._trusted(test, d.schema)


def eligibility_filter(train: Dataset, surgeon_min: int = 100, optype_min: int = 15) -> Dataset:
    """Keep records whose surgeon has more than ``surgeon_min`` records and
    whose operation type has more than ``optype_min`` records.

    Counts are taken once on the input.
    """
    s_counts = Counter(train.surgeon_ids)
    o_counts = Counter(train.operation_type_ids)
    keep = [
        r for r in train.records if s_counts[r.surgeon_id] > surgeon_min and o_counts[r.operation_type_id] > optype_min
    ]
    return Dataset._trusted(keep, train.schema)


# --------------------------------------------------------------------------
# tasks
# --------------------------------------------------------------------------


class TaskMode(str, enum.Enum):
    SURGEON = "surgeon"
    OPTYPE = "optype"
    INTERACTION = "interaction"


DEFAULT_MIN_TASK_SIZE = {TaskMode.SURGEON: 1, TaskMode.OPTYPE: 1, TaskMode.INTERACTION: 15}


@dataclass(frozen=True)
class TaskKey:
    mode: TaskMode
    surgeon_id: Optional[str] = None
    operation_type_id: Optional[str] = None

    @classmethod
    def for_record(cls, mode, rec: SurgeryRecord) -> "TaskKey":
        mode = TaskMode(mode)
        if mode is TaskMode.SURGEON:
            return cls(mode, rec.surgeon_id, None)
        if mode is TaskMode.OPTYPE:
            return cls(mode, None, rec.operation_type_id)
        return cls(mode, rec.surgeon_id, rec.operation_type_id)

    @property
    def label(self) -> str:
        if self.mode is TaskMode.SURGEON:
            return self.surgeon_id
        if self.mode is TaskMode.OPTYPE:
            return self.operation_type_id
        return f"{self.surgeon_id}|{self.operation_type_id}"

    @classmethod
    def from_label(cls, mode, label: str) -> "TaskKey":
        mode = TaskMode(mode)
        if mode is TaskMode.SURGEON:
            return cls(mode, label, None)
        if mode is TaskMode.OPTYPE:
            return cls(mode, None, label)
        surgeon, optype = label.split("|", 1)
        return cls(mode, surgeon, optype)

    def __str__(self):
        return self.label


@dataclass(frozen=True)
class TaskPartition:
    """Records of ``dataset`` grouped into regression tasks.

    ``tasks`` maps each key to the (sorted) row indices of its records; keys
    are ordered by label.
    """

    mode: TaskMode
    dataset: Dataset
    tasks: Mapping[TaskKey, np.ndarray]

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def sizes(self) -> dict:
        return {k: len(v) for k, v in self.tasks.items()}

    @property
    def keys(self) -> tuple:
        return tuple(self.tasks)

    def task_data(self, key: TaskKey) -> Dataset:
        return self.dataset.subset(self.tasks[key])


def partition_tasks(train: Dataset, mode, min_task_size: Optional[int] = None) -> TaskPartition:
    mode = TaskMode(mode)
    if len(train) == 0:
        raise DataError("cannot partition an empty dataset")
    if min_task_size is None:
        min_task_size = DEFAULT_MIN_TASK_SIZE[mode]
    groups = defaultdict(list)
    for i, rec in enumerate(train.records):
        groups[TaskKey.for_record(mode, rec)].append(i)
    tasks = {
        k: np.asarray(groups[k], dtype=np.intp)
        for k in sorted(groups, key=lambda k: k.label)
        if len(groups[k]) >= min_task_size
    }
    if not tasks:
        raise DataError(f"no {mode.value} task has at least {min_task_size} records")
    return TaskPartition(mode, train, tasks)


def center_by_operation_type(train: Dataset) -> tuple:
    """Subtract per-operation-type training means from the log durations.

    Returns ``(adjusted, type_means)`` keyed by record id and operation type.
    """
    y = train.log_durations
    sums = defaultdict(float)
    counts = Counter()
    for t, v in zip(train.operation_type_ids, y):
        sums[t] += v
        counts[t] += 1
    type_means = {t: sums[t] / counts[t] for t in sorted(counts)}
    adjusted = {r.record_id: r.log_duration - type_means[r.operation_type_id] for r in train.records}
    return adjusted, type_means


def type_mean_lookup(type_means: Mapping[str, float], fallback: float):
    return lambda t: type_means.get(t, fallback)


# --------------------------------------------------------------------------
# design encoding
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CategoricalEncoding:
    """Reference-coded dummies for one categorical field.

    ``levels`` are the levels given their own column, in frequency order;
    every other level (including ``reference`` and unseen ones) codes as 0.
    """

    field: str
    reference: str
    levels: tuple

    @property
    def column_names(self) -> tuple:
        return tuple(f"{self.field}={lv}" for lv in self.levels)

    def transform(self, labels: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(labels), len(self.levels)))
        pos = {lv: i for i, lv in enumerate(self.levels)}
        for row, lab in enumerate(labels):
            j = pos.get(lab)
            if j is not None:
                out[row, j] = 1.0
        return out


def fit_categorical(labels: Sequence[str], field_name: str, min_level_count: int = 1) -> CategoricalEncoding:
    counts = Counter(labels)
    order = sorted(counts, key=lambda lv: (-counts[lv], str(lv)))
    if not order:
        raise DataError(f"no levels for {field_name}")
    levels = tuple(lv for lv in order[1:] if counts[lv] >= min_level_count)
    return CategoricalEncoding(field_name, order[0], levels)


@dataclass(frozen=True)
class DesignEncoder:
    """Column recipe that turns a dataset into a :class:`DesignMatrix`."""

    numeric: tuple = ()
    categoricals: tuple = ()
    include_intercept: bool = True

    @property
    def column_names(self) -> tuple:
        names = ("intercept",) if self.include_intercept else ()
        names += tuple(self.numeric)
        for cat in self.categoricals:
            names += cat.column_names
        return names

    @property
    def n_columns(self) -> int:
        return len(self.column_names)

    def transform(self, data: Dataset) -> DesignMatrix:
        if len(data) == 0:
            raise DataError("cannot encode an empty record set")
        blocks = []
        if self.include_intercept:
            blocks.append(np.ones((len(data), 1)))
        if self.numeric:
            blocks.append(data.covariate_matrix(self.numeric))
        for cat in self.categoricals:
            blocks.append(cat.transform(data.labels(cat.field)))
        values = np.hstack(blocks) if blocks else np.zeros((len(data), 0))
        return DesignMatrix(values, self.column_names, self.include_intercept)

    def to_dict(self) -> dict:
        return {
            "numeric": list(self.numeric),
            "categoricals": [
                {"field": c.field, "reference": c.reference, "levels": list(c.levels)} for c in self.categoricals
            ],
            "include_intercept": self.include_intercept,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DesignEncoder":
        cats = tuple(CategoricalEncoding(c["field"], c["reference"], tuple(c["levels"])) for c in doc["categoricals"])
        return cls(tuple(doc["numeric"]), cats, bool(doc["include_intercept"]))


def build_encoder(
    data: Dataset,
    subset: Sequence[str] = (),
    categoricals: Sequence = (),
    include_intercept: bool = True,
) -> DesignEncoder:
    """Fit level sets on ``data``; numeric columns follow schema order."""
    if len(data) == 0:
        raise DataError("cannot encode an empty record set")
    unknown = [s for s in subset if s not in data.covariate_names]
    if unknown:
        raise DataError(f"unknown covariate(s) {unknown}")
    wanted = set(subset)
    numeric = tuple(c for c in data.covariate_names if c in wanted)
    cats = []
    for item in categoricals:
        field_name, min_count = (item, 1) if isinstance(item, str) else item
        cats.append(fit_categorical(data.labels(field_name), field_name, min_count))
    return DesignEncoder(numeric, tuple(cats), include_intercept)


def encode_design(
    data: Dataset,
    subset: Sequence[str] = (),
    categoricals: Sequence = (),
    include_intercept: bool = True,
) -> DesignMatrix:
    """Encode ``data`` as intercept, numeric covariates, then reference-coded dummies.

    ``categoricals`` holds field names or ``(field, min_level_count)`` pairs;
    levels rarer than ``min_level_count`` fold into the reference level,
    which is the most frequent one.
    """
    return build_encoder(data, subset, categoricals, include_intercept).transform(data)


@dataclass(frozen=True)
class LinearPredictor:
    """A fitted linear model together with the encoder that feeds it."""

    encoder: DesignEncoder
    coefficients: tuple

    def __post_init__(self):
        if len(self.coefficients) != self.encoder.n_columns:
            raise DataError("coefficient count does not match encoder columns")
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))

    def predict(self, data: Dataset) -> np.ndarray:
        if len(data) == 0:
            return np.zeros(0)
        return self.encoder.transform(data).values @ np.asarray(self.coefficients)

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "coefficients": dict(zip(self.encoder.column_names, self.coefficients)),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearPredictor":
        enc = DesignEncoder.from_dict(doc["encoder"])
        coefs = doc["coefficients"]
        return cls(enc, tuple(coefs[c] for c in enc.column_names))
