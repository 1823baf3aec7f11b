import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset, random_dataset
from surgsel.baselines import (
    fit_global,
    forward_select,
    lasso_fit,
    lasso_path,
    load_external_predictions,
    standardize,
)
from surgsel.data import encode_design
from surgsel.errors import ConvergenceError, DataError
from surgsel.synthetic import GeneratorConfig, generate_dataset


def kkt_violation(X, y, lam, beta_std):
    """Largest departure from the subgradient conditions on the standardized problem."""
    std = standardize(X, y)
    Z = std.apply(X)
    yc = y - std.y_mean
    grad = -Z.T @ (yc - Z @ beta_std) / len(y)
    worst = 0.0
    for g, b in zip(grad, beta_std):
        if b == 0.0:
            worst = max(worst, abs(g) - lam)
        else:
            worst = max(worst, abs(g + lam * np.sign(b)))
    return worst


def orthonormal_design(seed, n, p):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, p))
    A -= A.mean(axis=0)
    q, _ = np.linalg.qr(A)
    return q * np.sqrt(n)


class TestGlobal:
    def test_noiseless_exact(self, rng):
        d = random_dataset(rng, 120, n_surgeons=4, n_types=3)
        s_eff = {"S0": 0.0, "S1": 0.3, "S2": -0.2, "S3": 0.1}
        t_eff = {"T0": 0.0, "T1": 0.5, "T2": -0.4}
        X = d.covariate_array
        y = np.array([4 + s_eff[s] + t_eff[t] for s, t in zip(d.surgeon_ids, d.operation_type_ids)]) + 0.01 * X[:, 0] - 0.2 * X[:, 2]
        d2 = make_dataset(d.surgeon_ids, d.operation_type_ids, y, X)
        g = fit_global(d2)
        assert g.fit.r_squared == pytest.approx(1.0, abs=1e-10)
        assert g.fit.rss <= 1e-18 * len(y)

    def test_matches_normal_equations(self, rng):
        d = random_dataset(rng, 200, n_surgeons=5, n_types=4)
        g = fit_global(d, ["age", "hypertension"])
        X = encode_design(d, ["age", "hypertension"], ["surgeon_id", "operation_type_id"]).values
        ref = np.linalg.solve(X.T @ X, X.T @ d.log_durations)
        np.testing.assert_allclose(g.predictor.coefficients, ref, atol=1e-8)


class TestForwardSelect:
    def test_zero(self, rng):
        assert forward_select(random_dataset(rng, 50), ["age"], 0) == []

    def test_too_many(self, rng):
        with pytest.raises(DataError):
            forward_select(random_dataset(rng, 50), ["age"], 2)

    def test_first_pick_is_best_single(self):
        data, _ = generate_dataset(GeneratorConfig(n_surgeons=6, n_operation_types=4, task_size_mean=80, n_extra_covariates=4, seed=5))
        pool = list(data.covariate_names)
        y = data.log_durations
        best, best_rss = None, np.inf
        for name in sorted(pool):
            X = encode_design(data, [name], ["surgeon_id", "operation_type_id"]).values
            coef, *_ = np.linalg.lstsq(X, y, rcond=None)
            rss = float(np.sum((y - X @ coef) ** 2))
            if rss < best_rss - 1e-12:
                best, best_rss = name, rss
        assert forward_select(data, pool, 1) == [best]

    def test_rss_non_increasing(self):
        data, _ = generate_dataset(GeneratorConfig(n_surgeons=5, n_operation_types=3, task_size_mean=60, n_extra_covariates=3, seed=8))
        chosen = forward_select(data, data.covariate_names, len(data.covariate_names))
        assert sorted(chosen) == sorted(data.covariate_names)
        rss = [fit_global(data, chosen[:k]).fit.rss for k in range(len(chosen) + 1)]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(rss, rss[1:]))

    def test_lexicographic_ties(self, rng):
        d = random_dataset(rng, 60)
        X = d.covariate_array.copy()
        X[:, 0] = X[:, 1]
        d2 = make_dataset(d.surgeon_ids, d.operation_type_ids, d.log_durations, X)
        picks = forward_select(d2, ["n_anesthesiologists", "age"], 1)
        assert picks == ["age"]


class TestLasso:
    def test_lambda_zero_is_ols(self, rng):
        X = rng.standard_normal((60, 5))
        y = X @ np.array([1.0, -2.0, 0.5, 0.0, 0.3]) + 0.1 * rng.standard_normal(60)
        lambdas, path, std = lasso_path(X, y, np.array([0.1, 0.0]))
        Z = std.apply(X)
        ref, *_ = np.linalg.lstsq(Z, y - y.mean(), rcond=None)
        np.testing.assert_allclose(path[-1], ref, atol=1e-6)

    def test_single_covariate_soft_threshold(self, rng):
        x = rng.standard_normal(80)
        y = 0.7 * x + rng.standard_normal(80)
        std = standardize(x[:, None], y)
        z = std.apply(x[:, None])[:, 0]
        b_ols = float(z @ (y - y.mean()) / (z @ z))
        for lam in (0.0, 0.1, 0.3, abs(b_ols) + 0.1):
            _, path, _ = lasso_path(x[:, None], y, np.array([lam]))
            assert path[0, 0] == pytest.approx(np.sign(b_ols) * max(abs(b_ols) - lam, 0.0), abs=1e-6)

    def test_orthonormal_soft_threshold(self):
        X = orthonormal_design(1, 100, 6)
        y = X @ np.array([1.0, -0.5, 0.2, 0.05, 0.0, -0.01]) + np.random.default_rng(2).standard_normal(100) * 0.1
        lambdas, path, std = lasso_path(X, y)
        c = std.apply(X).T @ (y - y.mean()) / 100
        for lam, beta in zip(lambdas, path):
            np.testing.assert_allclose(beta, np.sign(c) * np.maximum(np.abs(c) - lam, 0.0), atol=1e-6)

    def test_kkt_seeded(self):
        rng = np.random.default_rng(50)
        X = rng.standard_normal((50, 10))
        y = X[:, :3] @ np.array([1.0, -1.0, 0.5]) + rng.standard_normal(50)
        lambdas, path, _ = lasso_path(X, y)
        for lam, beta in zip(lambdas, path):
            assert kkt_violation(X, y, lam, beta) <= 1e-6

    def test_lambda_max_gives_zero(self, rng):
        X = rng.standard_normal((40, 4))
        y = X[:, 0] + rng.standard_normal(40)
        _, path, _ = lasso_path(X, y)
        assert np.all(path[0] == 0.0)
        assert np.any(path[-1] != 0.0)

    def test_nonconvergence_reported(self, rng):
        X = rng.standard_normal((30, 3))
        X[:, 1] = X[:, 0] + 1e-3 * rng.standard_normal(30)
        y = X[:, 0] + rng.standard_normal(30)
        with pytest.raises(ConvergenceError, match="lambda="):
            lasso_path(X, y, np.array([1e-6]), max_sweeps=2)

    def test_fit_on_dataset(self):
        data, _ = generate_dataset(GeneratorConfig(n_surgeons=5, n_operation_types=3, task_size_mean=60, seed=3))
        res = lasso_fit(data, cv_folds=5, seed=1)
        assert len(res.lambdas) == 100
        assert res.lambdas[-1] == pytest.approx(res.lambdas[0] * 1e-4)
        assert res.best_index == int(np.argmin(res.cv_mse))
        pred = res.predict(data)
        X = encode_design(data, data.covariate_names, ["surgeon_id", "operation_type_id"], include_intercept=False).values
        np.testing.assert_allclose(pred, res.intercept + X @ res.coefficients, atol=1e-10)
        assert res.lambda_best > 0
        again = lasso_fit(data, cv_folds=5, seed=1)
        assert np.array_equal(again.cv_mse, res.cv_mse)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_l1_norm_non_increasing_in_lambda(seed):
    rng = np.random.default_rng(seed)
    X = orthonormal_design(seed, 40, 4) + 0.3 * rng.standard_normal((40, 4))
    y = X @ rng.standard_normal(4) + rng.standard_normal(40)
    _, path, _ = lasso_path(X, y, n_lambdas=30)
    l1 = np.abs(path).sum(axis=1)
    assert np.all(np.diff(l1) >= -1e-8)


def test_external_predictions(tmp_path):
    p = tmp_path / "ext.csv"
    p.write_text("record_id,predicted_log_duration\nR1,4.5\nR2,3.25\n")
    assert load_external_predictions(p) == {"R1": 4.5, "R2": 3.25}
    bad = tmp_path / "bad.csv"
    bad.write_text("record_id,pred\nR1,4.5\n")
    with pytest.raises(DataError):
        load_external_predictions(bad)
