import json
import math

import numpy as np
import pytest

from surgsel.data import TaskMode, encode_design, partition_tasks
from surgsel.errors import DataError
from surgsel.ols import fit_ols
from surgsel.selection import CandidateModel
from surgsel.synthetic import (
    ANESTHESIOLOGIST_PROBS,
    GeneratorConfig,
    covariate_moments,
    generate_dataset,
    load_config,
    oracle_risk,
    sample_covariates,
)


def single_task(**kw):
    base = dict(n_surgeons=1, n_operation_types=1, task_sizes=[100], seed=0)
    base.update(kw)
    return GeneratorConfig(**base)


class TestGenerator:
    def test_noiseless_true_support_exact(self):
        cfg = GeneratorConfig(n_surgeons=5, n_operation_types=3, task_size_mean=60, sigma=0.0, seed=2)
        data, truth = generate_dataset(cfg)
        part = partition_tasks(data, TaskMode.SURGEON)
        for key in part.keys:
            task = part.task_data(key)
            X = encode_design(task, cfg.support, ["operation_type_id"])
            f = fit_ols(X, task.log_durations)
            assert f.rss <= 1e-20 * len(task)

    def test_anesthesiologist_frequencies(self):
        X = sample_covariates(GeneratorConfig(), 50_000, np.random.default_rng(0))
        col = list(GeneratorConfig().covariate_names).index("n_anesthesiologists")
        freq = np.bincount(X[:, col].astype(int), minlength=5) / 50_000
        np.testing.assert_allclose(freq, ANESTHESIOLOGIST_PROBS, atol=0.01)

    def test_table_frequencies(self):
        pct = [round(100 * p, 2) for p in ANESTHESIOLOGIST_PROBS]
        assert pct[:4] == [38.27, 42.51, 18.38, 0.82]
        assert [round(100 * p, 1) for p in ANESTHESIOLOGIST_PROBS] == [38.3, 42.5, 18.4, 0.8, 0.0]
        assert round(100 * ANESTHESIOLOGIST_PROBS[4], 2) == 0.02

    def test_age_quartiles(self):
        X = sample_covariates(GeneratorConfig(), 200_000, np.random.default_rng(1))
        q25, q50, q75 = np.percentile(X[:, 0], [25, 50, 75])
        assert q50 == pytest.approx(53, abs=0.5)
        # a symmetric law cannot hit the skewed quartiles exactly; stay within 2 years
        assert q25 == pytest.approx(37, abs=2.0)
        assert q75 == pytest.approx(66, abs=2.0)

    def test_reproducible(self):
        cfg = GeneratorConfig(n_surgeons=4, task_size_mean=50, seed=9)
        a, _ = generate_dataset(cfg)
        b, _ = generate_dataset(cfg)
        assert a.records == b.records

    def test_task_sizes_within_bounds(self):
        _, truth = generate_dataset(GeneratorConfig(n_surgeons=200, seed=4))
        assert truth.sizes.min() >= 15 and truth.sizes.max() <= 1052

    def test_response_moments(self):
        cfg = single_task(task_sizes=[50_000], support=("age",), coef_mean={"age": 0.2}, seed=6)
        data, truth = generate_dataset(cfg)
        y = data.log_durations
        m = covariate_moments(cfg)
        mean = truth.intercepts[0] + truth.type_effects[0] + truth.betas[0, 0] * m["age"][0]
        var = truth.response_variance(0)
        assert abs(y.mean() - mean) <= 4 * math.sqrt(var / len(y))
        assert abs(y.var() - var) <= 4 * var * math.sqrt(2 / len(y))

    @pytest.mark.parametrize(
        "kw",
        [
            {"sigma": -1.0},
            {"support": ()},
            {"support": ("nope",)},
            {"anesthesiologist_probs": (0.5, 0.4)},
            {"task_sizes": [10, 20]},
        ],
    )
    def test_invalid_config(self, kw):
        with pytest.raises(DataError):
            GeneratorConfig(**{"n_surgeons": 3, **kw})

    def test_config_json_round_trip(self, tmp_path):
        cfg = GeneratorConfig(n_surgeons=7, n_extra_covariates=2, seed=5)
        p = tmp_path / "g.json"
        p.write_text(json.dumps(cfg.to_dict()))
        assert load_config(p) == cfg

    def test_unknown_config_key(self):
        with pytest.raises(DataError):
            GeneratorConfig.from_dict({"n_surgeon": 3})


class TestOracle:
    def test_true_support_large_n_floor(self):
        cfg = single_task(support=("age", "n_anesthesiologists"), coef_mean={"age": 0.1, "n_anesthesiologists": 0.15})
        _, truth = generate_dataset(cfg)
        est, se = oracle_risk(truth, CandidateModel(cfg.support), 10_000, mc_reps=1000, seed=1)
        # OLS with d parameters adds about sigma^2 d / n on top of the floor
        floor = cfg.sigma**2 * (1 + 3 / 10_000)
        assert abs(est - floor) <= 3 * se

    def test_intercept_only_bias(self):
        cfg = single_task(support=("age",), coef_mean={"age": 0.2})
        _, truth = generate_dataset(cfg)
        n = 50
        est, se = oracle_risk(truth, CandidateModel(), n, mc_reps=20_000, seed=2)
        var_age = covariate_moments(cfg)["age"][1]
        delta = truth.betas[0, 0] ** 2 * var_age
        # prediction by a sample mean: (sigma^2 + delta) (1 + 1/n)
        expected = (cfg.sigma**2 + delta) * (1 + 1 / n)
        assert delta > 5 * se
        assert abs(est - expected) <= 3 * se

    def test_standard_error_scaling(self):
        _, truth = generate_dataset(single_task(n_surgeons=2, task_sizes=[100, 100]))
        m = CandidateModel(("age",))
        _, se1 = oracle_risk(truth, m, 30, mc_reps=1000, seed=3)
        _, se16 = oracle_risk(truth, m, 30, mc_reps=16_000, seed=4)
        assert 2.0 <= se1 / se16 <= 8.0

    def test_independent_of_batching(self):
        _, truth = generate_dataset(single_task())
        m = CandidateModel(("age",))
        a = oracle_risk(truth, m, 20, mc_reps=1000, seed=5, batch_size=1000)
        b = oracle_risk(truth, m, 20, mc_reps=1000, seed=5, batch_size=1000)
        assert a == b

    def test_preconditions(self):
        _, truth = generate_dataset(single_task())
        with pytest.raises(DataError):
            oracle_risk(truth, CandidateModel(("age",)), 2, mc_reps=1000)
        with pytest.raises(DataError):
            oracle_risk(truth, CandidateModel(("age",)), 20, mc_reps=10)
        with pytest.raises(DataError):
            oracle_risk(truth, CandidateModel(("nope",)), 20, mc_reps=1000)
