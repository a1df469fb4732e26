import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from periodic_impute.core import ConditioningError, DataMatrix, SeedSpec
from periodic_impute.mvn_em import (EmOptions, MvnParams, conditional_normal, em_fit, emb_impute,
                                    observed_loglik, sweep)

TIGHT = EmOptions(tol=1e-12, max_iter=10_000)


def toy_regression_data(n=200, missing=0.3, seed=0):
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=n)
    x2 = 0.5 * x1 + rng.normal(size=n)
    y = 1.0 + 2.0 * x1 - 1.5 * x2 + rng.normal(scale=0.7, size=n)
    ymask = rng.random(n) >= missing
    return DataMatrix.from_columns({"y": y, "x1": x1, "x2": x2}, {"y": ymask})


def implied_regression(theta: MvnParams, target=0):
    p = theta.mu.size
    rest = [j for j in range(p) if j != target]
    sxx = theta.sigma[np.ix_(rest, rest)]
    syx = theta.sigma[target, rest]
    beta = np.linalg.solve(sxx, syx)
    intercept = theta.mu[target] - beta @ theta.mu[rest]
    resid = theta.sigma[target, target] - syx @ beta
    return intercept, beta, resid


# -- sweep / conditional law -------------------------------------------------

def test_sweep_matches_inverse_and_is_reversible():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 5))
    s = a @ a.T + 5 * np.eye(5)
    g = s.copy()
    for k in range(5):
        g = sweep(g, k)
    assert np.allclose(g, -np.linalg.inv(s), atol=1e-12)
    back = sweep(sweep(s, 2), 2)
    flip = np.ones(5)
    flip[2] = -1
    expected = s * np.outer(flip, flip)
    expected[2, 2] = s[2, 2]
    assert np.allclose(back, expected, atol=1e-12)


def test_bivariate_closed_form():
    theta = MvnParams(np.zeros(2), np.array([[1.0, 0.5], [0.5, 1.0]]))
    mean, cov = conditional_normal(theta, [0], [1.0])
    assert abs(mean[0] - 0.5) <= 1e-10
    assert abs(cov[0, 0] - 0.75) <= 1e-10


def test_general_closed_form():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(4, 4))
    s = a @ a.T + np.eye(4)
    mu = rng.normal(size=4)
    obs, mis = [0, 2], [1, 3]
    x = rng.normal(size=2)
    mean, cov = conditional_normal(MvnParams(mu, s), obs, x)
    soo = s[np.ix_(obs, obs)]
    smo = s[np.ix_(mis, obs)]
    assert np.allclose(mean, mu[mis] + smo @ np.linalg.solve(soo, x - mu[obs]), atol=1e-10)
    assert np.allclose(cov, s[np.ix_(mis, mis)] - smo @ np.linalg.solve(soo, smo.T), atol=1e-10)


def test_diagonal_covariance_ignores_observations():
    theta = MvnParams(np.array([1.0, 2.0, 3.0]), np.diag([1.0, 4.0, 9.0]))
    mean, cov = conditional_normal(theta, [0, 2], [100.0, -50.0])
    assert mean.tolist() == [2.0]
    assert cov.tolist() == [[4.0]]


def test_no_observed_is_marginal():
    mu = np.array([1.0, -1.0])
    s = np.array([[2.0, 0.3], [0.3, 1.0]])
    mean, cov = conditional_normal(MvnParams(mu, s), [], [])
    assert np.array_equal(mean, mu)
    assert np.array_equal(cov, s)


def test_singular_observed_block_is_repaired():
    s = np.array([[1.0, 1.0, 0.5], [1.0, 1.0, 0.5], [0.5, 0.5, 1.0]])
    mean, cov = conditional_normal(MvnParams(np.zeros(3), s), [0, 1], [1.0, 1.0])
    assert np.isfinite(mean).all() and cov[0, 0] > 0


def test_unrepairable_block_names_columns():
    with pytest.raises(ConditioningError, match=r"\[0, 1\]"):
        conditional_normal(MvnParams(np.zeros(3), np.zeros((3, 3))), [0, 1], [0.0, 0.0])


# -- EM --------------------------------------------------------------------

def test_fully_observed_gives_sample_moments():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 3)) @ np.array([[1, 0.2, 0], [0, 1, 0.4], [0, 0, 1]])
    theta = em_fit(DataMatrix(("a", "b", "c"), x))
    assert np.allclose(theta.mu, x.mean(axis=0), atol=1e-12)
    assert np.allclose(theta.sigma, np.cov(x, rowvar=False, bias=True), atol=1e-12)
    assert theta.converged and theta.iters == 1


@pytest.mark.parametrize("missing", [0.05, 0.3, 0.7])
def test_univariate_missingness_equals_complete_case_least_squares(missing):
    data = toy_regression_data(missing=missing, seed=int(missing * 100))
    theta = em_fit(data, TIGHT)
    intercept, beta, resid = implied_regression(theta)
    cc = data.mask[:, 0]
    X = np.column_stack([np.ones(cc.sum()), data.values[cc, 1:]])
    coef, *_ = np.linalg.lstsq(X, data.values[cc, 0], rcond=None)
    assert abs(intercept - coef[0]) <= 1e-6
    assert np.allclose(beta, coef[1:], atol=1e-6, rtol=0)
    rss = np.sum((data.values[cc, 0] - X @ coef) ** 2)
    assert resid == pytest.approx(rss / cc.sum(), abs=1e-6)


def brute_force_em(x, iters=20_000, tol=1e-14):
    """Textbook EM for a bivariate normal, one row at a time, no standardisation."""
    x = [list(r) for r in x]
    n = len(x)
    obs = [[v == v for v in r] for r in x]
    mu = [sum(r[j] for r, o in zip(x, obs) if o[j]) / sum(o[j] for o in obs) for j in range(2)]
    var = [sum((r[j] - mu[j]) ** 2 for r, o in zip(x, obs) if o[j]) / sum(o[j] for o in obs)
           for j in range(2)]
    s = [[var[0], 0.0], [0.0, var[1]]]
    for _ in range(iters):
        t1 = [0.0, 0.0]
        t2 = [[0.0, 0.0], [0.0, 0.0]]
        for r, o in zip(x, obs):
            e = list(r)
            c = [[0.0, 0.0], [0.0, 0.0]]
            if o[0] and not o[1]:
                b = s[1][0] / s[0][0]
                e[1] = mu[1] + b * (r[0] - mu[0])
                c[1][1] = s[1][1] - b * s[0][1]
            elif o[1] and not o[0]:
                b = s[0][1] / s[1][1]
                e[0] = mu[0] + b * (r[1] - mu[1])
                c[0][0] = s[0][0] - b * s[1][0]
            for i in range(2):
                t1[i] += e[i]
                for j in range(2):
                    t2[i][j] += e[i] * e[j] + c[i][j]
        new_mu = [t1[0] / n, t1[1] / n]
        new_s = [[t2[i][j] / n - new_mu[i] * new_mu[j] for j in range(2)] for i in range(2)]
        delta = max(abs(new_mu[0] - mu[0]), abs(new_mu[1] - mu[1]),
                    *(abs(new_s[i][j] - s[i][j]) for i in range(2) for j in range(2)))
        mu, s = new_mu, new_s
        if delta < tol:
            break
    return np.array(mu), np.array(s)


def test_monotone_bivariate_toy_matches_hand_iterated_em():
    x = np.array([[1.0, 2.1], [2.0, 3.9], [3.0, 6.2], [4.0, np.nan], [5.0, np.nan]])
    mu, s = brute_force_em(x)
    theta = em_fit(DataMatrix(("x", "y"), x), TIGHT)
    assert np.allclose(theta.mu, mu, atol=1e-8, rtol=0)
    assert np.allclose(theta.sigma, s, atol=1e-8, rtol=0)


def test_general_pattern_matches_brute_force_em():
    rng = np.random.default_rng(4)
    x = rng.multivariate_normal([1, -1], [[2, 0.8], [0.8, 1]], size=40)
    x[rng.random(40) < 0.25, 0] = np.nan
    x[rng.random(40) < 0.25, 1] = np.nan
    x = x[~np.isnan(x).all(axis=1)]
    mu, s = brute_force_em(x)
    theta = em_fit(DataMatrix(("a", "b"), x), TIGHT)
    assert np.allclose(theta.mu, mu, atol=1e-8)
    assert np.allclose(theta.sigma, s, atol=1e-8)


def general_pattern(seed, n=80, p=4):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(p, p))
    x = rng.normal(size=(n, p)) @ a + rng.normal(size=p)
    mask = rng.random((n, p)) > 0.3
    mask[np.arange(n), rng.integers(0, p, n)] = True  # at least one observed per row
    return DataMatrix(tuple(f"v{j}" for j in range(p)), x, mask)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_loglik_never_decreases(seed):
    data = general_pattern(seed)
    theta = em_fit(data, EmOptions(tol=1e-8, max_iter=500, debug=True))
    diffs = np.diff(theta.loglik_trace)
    assert np.all(diffs >= -1e-9 * np.abs(theta.loglik_trace[1:]).clip(1))


def test_loglik_trace_is_on_standardised_scale_but_fit_is_mle():
    data = general_pattern(7)
    theta = em_fit(data, TIGHT)
    ll = observed_loglik(data.values, data.mask, theta.mu, theta.sigma)
    for eps in (1e-3, -1e-3):
        bumped = theta.mu + eps
        assert observed_loglik(data.values, data.mask, bumped, theta.sigma) < ll


def test_permutation_invariance():
    data = general_pattern(8)
    perm = np.random.default_rng(0).permutation(data.n_rows)
    a = em_fit(data, TIGHT)
    b = em_fit(DataMatrix(data.names, data.values[perm], data.mask[perm]), TIGHT)
    assert np.allclose(a.mu, b.mu, atol=1e-10)
    assert np.allclose(a.sigma, b.sigma, atol=1e-10)


def test_standardize_off_reaches_same_fit():
    data = general_pattern(9)
    a = em_fit(data, TIGHT)
    b = em_fit(data, EmOptions(tol=1e-12, max_iter=10_000, standardize=False))
    assert np.allclose(a.mu, b.mu, atol=1e-8)
    assert np.allclose(a.sigma, b.sigma, atol=1e-8)


def test_non_convergence_is_flagged():
    data = general_pattern(10)
    theta = em_fit(data, EmOptions(tol=1e-12, max_iter=2))
    assert theta.converged is False and theta.iters == 2


def test_zero_variance_column():
    x = np.column_stack([np.ones(10), np.arange(10.0)])
    with pytest.raises(ConditioningError, match="c"):
        em_fit(DataMatrix(("c", "t"), x))


# -- EMB ---------------------------------------------------------------------

def test_emb_without_missing_cells_returns_input():
    data = DataMatrix(("a", "b"), np.random.default_rng(0).normal(size=(30, 2)))
    out = emb_impute(data, 5, None, SeedSpec(1, (("t", 0),)))
    assert out.m == 5
    assert all(np.array_equal(c.values, data.values) for c in out.completed)


def test_emb_preserves_observed_and_varies_missing():
    data = toy_regression_data(n=300, missing=0.2)
    out = emb_impute(data, 20, None, SeedSpec(3, (("t", 0),)))
    assert len(out.completed) == 20 and len(out.params_per_imputation) == 20
    miss = ~data.mask
    for c in out.completed:
        assert np.array_equal(c.values[data.mask], data.values[data.mask])
        assert c.mask.all()
    draws = np.array([c.values[miss] for c in out.completed])
    assert np.all(draws.std(axis=0) > 0)


def test_emb_is_deterministic():
    data = toy_regression_data(n=100)
    a = emb_impute(data, 3, None, SeedSpec(4, (("t", 0),)))
    b = emb_impute(data, 3, None, SeedSpec(4, (("t", 0),)))
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a.completed, b.completed))


def test_emb_variance_matches_bootstrap_oracle():
    rng = np.random.default_rng(12)
    n = 40
    x = rng.normal(size=n)
    y = 2.0 + 1.5 * x + rng.normal(scale=0.8, size=n)
    ymask = np.ones(n, bool)
    ymask[0] = False
    data = DataMatrix.from_columns({"x": x, "y": y}, {"y": ymask})
    out = emb_impute(data, 200, None, SeedSpec(12, (("toy", 0),)))
    draws = np.array([c.values[0, 1] for c in out.completed])

    # oracle: closed-form MLE on 1000 row resamples, law of total variance
    orng = np.random.default_rng(99)
    means, variances = [], []
    while len(means) < 1000:
        rows = orng.integers(0, n, n)
        cc = rows[ymask[rows]]
        if cc.size < 3:
            continue
        xc, yc = x[cc], y[cc]
        b = np.sum((xc - xc.mean()) * (yc - yc.mean())) / np.sum((xc - xc.mean()) ** 2)
        a = yc.mean() - b * xc.mean()
        means.append(a + b * x[0])
        variances.append(np.mean((yc - a - b * xc) ** 2))
    expected = np.mean(variances) + np.var(means)
    assert draws.var(ddof=1) == pytest.approx(expected, rel=0.25)
