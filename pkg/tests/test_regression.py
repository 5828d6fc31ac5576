import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convolt.features import FEATURE_NAMES
from convolt.regression import (
    QuantileModel,
    RidgeModel,
    Standardizer,
    fit_quantile,
    fit_quantile_pair,
    fit_ridge,
    load_model,
    pinball_loss,
    predict_ridge,
    save_model,
)


def gauss_solve(A, b):
    """Gaussian elimination with partial pivoting on Python lists."""
    n = len(b)
    M = [list(map(float, A[i])) + [float(b[i])] for i in range(n)]
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(M[r][c]))
        M[c], M[p] = M[p], M[c]
        for r in range(c + 1, n):
            f = M[r][c] / M[c][c]
            for k in range(c, n + 1):
                M[r][k] -= f * M[c][k]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        x[r] = (M[r][n] - sum(M[r][k] * x[k] for k in range(r + 1, n))) / M[r][r]
    return x


def ridge_oracle(X, y, lam):
    """Normal equations on population-standardised columns, intercept = mean(y)."""
    n, p = len(X), len(X[0])
    means = [sum(X[i][j] for i in range(n)) / n for j in range(p)]
    stds = [(sum((X[i][j] - means[j]) ** 2 for i in range(n)) / n) ** 0.5 for j in range(p)]
    Z = [[(X[i][j] - means[j]) / stds[j] for j in range(p)] for i in range(n)]
    ybar = sum(y) / n
    A = [[sum(Z[i][a] * Z[i][b] for i in range(n)) + (lam if a == b else 0.0) for b in range(p)] for a in range(p)]
    rhs = [sum(Z[i][a] * (y[i] - ybar) for i in range(n)) for a in range(p)]
    return gauss_solve(A, rhs), ybar


def pinball_scan(y, tau, grid):
    losses = [sum(max(tau * (v - b), (tau - 1) * (v - b)) for v in y) for b in grid]
    best = min(losses)
    return [b for b, l in zip(grid, losses) if l <= best + 1e-9]


class TestStandardizer:
    def test_constant_column_inactive(self):
        X = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
        s = Standardizer.fit(X)
        assert s.active.tolist() == [True, False]
        assert s.std[1] == 1.0
        np.testing.assert_allclose(s.transform(X)[:, 1], 0.0)

    def test_json_round_trip(self):
        s = Standardizer.fit(np.random.default_rng(0).normal(size=(10, 3)))
        t = Standardizer.from_json(s.to_json())
        np.testing.assert_array_equal(t.mean, s.mean)
        np.testing.assert_array_equal(t.std, s.std)


class TestRidge:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("lam", [0.0, 1.0, 10.0])
    def test_matches_normal_equation_oracle(self, seed, lam):
        rng = np.random.default_rng(seed)
        n, p = 60, 23
        X = rng.normal(size=(n, p)) * rng.uniform(0.1, 10, size=p) + rng.normal(size=p)
        y = X @ rng.normal(size=p) + rng.normal(size=n)
        m = fit_ridge(X, y, lam, FEATURE_NAMES)
        w, b = ridge_oracle(X.tolist(), y.tolist(), lam)
        np.testing.assert_allclose(m.weights, w, rtol=1e-8, atol=1e-10 * np.abs(w).max())
        assert m.intercept == pytest.approx(b, rel=1e-12)

    def test_recovers_noise_free_coefficients(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(50, 4))
        y = 2.0 + X @ np.array([1.0, -2.0, 0.5, 0.0])
        m = fit_ridge(X, y, lam=0.0)
        np.testing.assert_allclose(m.predict(X), y, atol=1e-10)
        assert predict_ridge(m, X[3]) == pytest.approx(y[3])

    def test_constant_feature_gets_zero_weight(self):
        rng = np.random.default_rng(2)
        X = np.column_stack([rng.normal(size=30), np.full(30, 7.0)])
        m = fit_ridge(X, X[:, 0] * 3, lam=0.0)
        assert m.weights[1] == 0.0

    def test_all_constant_gives_mean(self):
        X = np.ones((5, 3))
        y = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        m = fit_ridge(X, y)
        np.testing.assert_allclose(m.predict(X), 3.0)

    def test_collinear_without_penalty_raises(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=20)
        X = np.column_stack([a, 2 * a])
        with pytest.raises(ValueError, match="singular"):
            fit_ridge(X, a, lam=0.0)
        fit_ridge(X, a, lam=1.0)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="finite"):
            fit_ridge(np.array([[1.0], [np.nan]]), np.array([1.0, 2.0]))
        with pytest.raises(ValueError, match="penalty"):
            fit_ridge(np.ones((3, 1)), np.ones(3), lam=-1)
        with pytest.raises(ValueError, match="feature names"):
            fit_ridge(np.ones((3, 2)), np.ones(3), feature_names=["a"])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 1000))
    def test_penalty_shrinks_weight_norm(self, lam, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(25, 5))
        y = X @ rng.normal(size=5) + rng.normal(size=25)
        small = fit_ridge(X, y, lam)
        big = fit_ridge(X, y, lam * 10)
        assert np.linalg.norm(big.weights) <= np.linalg.norm(small.weights) + 1e-12

    def test_json_round_trip_and_name_check(self, tmp_path):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(30, 23))
        m = fit_ridge(X, rng.normal(size=30), 1.0, FEATURE_NAMES)
        save_model(tmp_path / "m.json", m)
        back = load_model(tmp_path / "m.json", FEATURE_NAMES)
        assert isinstance(back, RidgeModel)
        np.testing.assert_array_equal(back.predict(X), m.predict(X))
        with pytest.raises(ValueError, match="expected ordering"):
            load_model(tmp_path / "m.json", tuple(reversed(FEATURE_NAMES)))


class TestPinball:
    def test_loss_values(self):
        r = np.array([-2.0, 0.0, 3.0])
        np.testing.assert_allclose(pinball_loss(r, 0.9), [0.2, 0.0, 2.7])

    def test_intercept_only_tau_09_matches_scan(self):
        y = np.arange(1, 101, dtype=float)
        grid = [i / 4 for i in range(4, 401)]
        minimisers = pinball_scan(y.tolist(), 0.9, grid)
        assert min(minimisers) == 90.0 and max(minimisers) == 91.0
        fit = fit_quantile(np.zeros((100, 1)), y, 0.9)
        assert 89.0 <= fit.intercept <= 92.0

    @pytest.mark.parametrize("tau", [0.05, 0.5, 0.95])
    def test_close_to_exact_optimum_with_slope(self, tau):
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 10, size=80)
        y = 1.0 + 0.5 * x + rng.normal(scale=0.5, size=80)
        fit = fit_quantile(x[:, None], y, tau, lam=0.0, n_iter=20000)
        loss = pinball_loss(y - fit.predict(x[:, None]), tau).sum()
        # exact optimum over a fine (intercept, slope) grid around the truth
        z = (x - x.mean()) / x.std()
        bs = np.linspace(y.mean() - 3, y.mean() + 3, 241)
        ws = np.linspace(0, 3, 241)
        best = min(pinball_loss(y[None, :] - b - w * z[None, :], tau).sum(axis=1).min()
                   for b in bs for w in ws[None, :].T)
        assert loss <= best * 1.01 + 1e-6

    def test_quantile_ordering(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(200, 1))
        y = x[:, 0] + rng.normal(size=200)
        lo = fit_quantile(x, y, 0.1).predict(x)
        hi = fit_quantile(x, y, 0.9).predict(x)
        assert np.mean(y < lo) == pytest.approx(0.1, abs=0.05)
        assert np.mean(y > hi) == pytest.approx(0.1, abs=0.05)

    def test_bad_tau(self):
        with pytest.raises(ValueError, match="tau"):
            fit_quantile(np.ones((3, 1)), np.ones(3), 1.0)


class TestQuantilePair:
    def test_taus_and_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        x = rng.uniform(1, 5, size=(50, 1))
        y = 2 * x[:, 0] + rng.normal(size=50)
        m = fit_quantile_pair(x, y, 0.1, feature_names=("y_hat0_ml",))
        assert m.taus == (0.05, 0.95)
        lo, hi, crossed = m.predict(x)
        assert np.all(lo <= hi) and crossed == 0
        save_model(tmp_path / "q.json", m)
        back = load_model(tmp_path / "q.json", ("y_hat0_ml",))
        assert isinstance(back, QuantileModel)
        np.testing.assert_array_equal(back.predict(x)[0], lo)

    def test_crossing_is_swapped_and_counted(self):
        st_ = Standardizer(np.zeros(1), np.ones(1), np.ones(1, bool))
        m = QuantileModel(st_, np.array([[1.0], [-1.0]]), np.array([0.0, 0.0]), (0.05, 0.95), 0.01, ("x",))
        lo, hi, crossed = m.predict(np.array([[-1.0], [2.0]]))
        assert crossed == 1
        assert lo.tolist() == [-1.0, -2.0] and hi.tolist() == [1.0, 2.0]

    def test_bad_taus(self):
        st_ = Standardizer(np.zeros(1), np.ones(1), np.ones(1, bool))
        with pytest.raises(ValueError, match="tau_lo"):
            QuantileModel(st_, np.zeros((2, 1)), np.zeros(2), (0.9, 0.1), 0.01, ("x",))
