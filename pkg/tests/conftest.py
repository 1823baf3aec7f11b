import datetime as dt

import numpy as np
import pytest

from surgsel.data import CovariateSpec, Dataset, SurgeryRecord

SIMPLE_SCHEMA = (
    CovariateSpec("age", "continuous"),
    CovariateSpec("n_anesthesiologists", "count"),
    CovariateSpec("hypertension", "indicator"),
)


def make_dataset(surgeons, types, log_y, covariates=None, dates=None, schema=SIMPLE_SCHEMA):
    """Dataset from parallel lists; ``covariates`` is an (n, k) array in schema order."""
    n = len(log_y)
    names = [c.name for c in schema]
    if covariates is None:
        covariates = np.zeros((n, len(names)))
    covariates = np.asarray(covariates, dtype=float)
    if dates is None:
        dates = [dt.date(2015, 1, 1)] * n
    records = [
        SurgeryRecord(
            record_id=f"R{i:05d}",
            surgeon_id=str(surgeons[i]),
            operation_type_id=str(types[i]),
            duration_minutes=float(np.exp(log_y[i])),
            date=dates[i],
            covariates=dict(zip(names, map(float, covariates[i]))),
        )
        for i in range(n)
    ]
    return Dataset(records, schema)


def random_dataset(rng, n, n_surgeons=3, n_types=4, schema=SIMPLE_SCHEMA):
    surgeons = [f"S{k}" for k in rng.integers(0, n_surgeons, n)]
    types = [f"T{k}" for k in rng.integers(0, n_types, n)]
    X = np.column_stack(
        [
            rng.normal(50, 15, n) if c.kind == "continuous" else rng.integers(0, 2 if c.kind == "indicator" else 4, n)
            for c in schema
        ]
    )
    y = 4.0 + 0.01 * X[:, 0] + 0.2 * rng.standard_normal(n)
    return make_dataset(surgeons, types, y, X, schema=schema)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
