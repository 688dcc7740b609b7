import numpy as np
import pytest
from scipy import stats

from conftest import factor_table
from si_forge.errors import DataError
from si_forge.meta import (
    MetricsTable,
    average_ranks,
    classifier_accuracy,
    discriminability,
    discriminability_all,
    fit_logistic,
    pearson,
    read_metrics_table,
    residual_pca,
    residual_robustness_correlation,
    residual_robustness_score,
    residualize,
    spearman,
    spearman_matrix,
    stratified_resample,
    variance_fractions,
)


def table_from(columns, groups=None, names=None):
    values = np.column_stack(columns)
    n, p = values.shape
    names = names or ["ref"] + [f"m{j}" for j in range(p - 1)]
    groups = groups or [f"g{i % 2}" for i in range(n)]
    return MetricsTable([f"id{i}" for i in range(n)], groups, names, values, names[0])


# correlations ----------------------------------------------------------------

def test_correlations_match_scipy_on_random_tables():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(5, 40))
        x = rng.normal(size=n)
        y = 0.5 * x + rng.normal(size=n)
        # Coarse rounding forces ties into the ranks.
        xr, yr = np.round(x, 1), np.round(y, 1)
        assert abs(pearson(x, y) - stats.pearsonr(x, y)[0]) <= 1e-12
        assert abs(spearman(xr, yr) - stats.spearmanr(xr, yr)[0]) <= 1e-12


def test_average_ranks_ties():
    np.testing.assert_array_equal(average_ranks([1, 2, 2, 4]), [1, 2.5, 2.5, 4])
    np.testing.assert_array_equal(average_ranks([3, 1, 2]), stats.rankdata([3, 1, 2]))


def test_spearman_tied_ranks_equal_one():
    assert spearman([1, 2, 2, 4], [1, 3, 3, 5]) == pytest.approx(1.0, abs=1e-12)


def test_spearman_invariant_to_monotone_transform():
    rng = np.random.default_rng(1)
    x, y = rng.uniform(0.1, 5, 30), rng.uniform(0.1, 5, 30)
    assert spearman(x, y) == pytest.approx(spearman(np.log(x), y ** 3), abs=1e-12)


def test_pearson_zero_variance():
    with pytest.raises(DataError):
        pearson([1, 1, 1], [1, 2, 3])


def test_spearman_matrix_constant_column_is_nan():
    rng = np.random.default_rng(2)
    t = table_from([rng.normal(size=10), rng.normal(size=10), np.ones(10)])
    m = spearman_matrix(t)
    assert m[0, 0] == 1.0 and np.allclose(m, m.T, equal_nan=True)
    assert np.isnan(m[2]).all() and np.isnan(m[:, 2]).all()


# residuals -------------------------------------------------------------------

def test_residuals_match_normal_equations():
    rng = np.random.default_rng(3)
    x = rng.normal(size=25)
    y = 2 * x + rng.normal(size=25)
    t = table_from([x, y])
    A = np.column_stack([np.ones(25), x])
    beta = np.linalg.solve(A.T @ A, A.T @ y)
    r = residualize(t, "m0")
    np.testing.assert_allclose(r, y - A @ beta, atol=1e-12)
    assert abs(r @ x) <= 1e-9 and abs(r.sum()) <= 1e-9


def test_affine_metric_has_zero_residuals():
    x = np.linspace(0, 1, 12)
    r = residualize(table_from([x, 3 * x - 1]), "m0")
    assert np.abs(r).max() <= 1e-12


def test_residualize_reference_rejected():
    with pytest.raises(DataError):
        residualize(table_from([np.arange(5.0), np.arange(5.0)]), "ref")


def test_residual_robustness_score_and_correlation():
    ref = np.array([0.7, 0.75, 0.8, 0.85])
    a, b = ref - 0.1, ref - np.array([0.3, 0.2, 0.1, 0.0])
    transfer = np.array([1.0, 2.0, 3.0, 4.0])
    t = table_from([ref, a, b, transfer], names=["ref", "a", "b", "transfer"])
    np.testing.assert_allclose(residual_robustness_score(t, ["a", "b"]), [-0.2, -0.15, -0.1, -0.05])
    assert residual_robustness_correlation(t, ["a", "b"], "transfer") == pytest.approx(1.0, abs=1e-12)


def test_read_metrics_table(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("model_id,group_label,imagenet,a\nx,g1,0.7,0.5\ny,g2,0.8,\n")
    t = read_metrics_table(p)
    assert t.reference_metric == "imagenet"
    assert np.isnan(t.values[1, 1])
    with pytest.raises(DataError, match="missing"):
        t.column("a")


# logistic regression -------------------------------------------------------------

def test_logistic_matches_sklearn():
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(4)
    X = rng.normal(size=(60, 3))
    y = np.argmax(X @ rng.normal(size=(3, 3)) + rng.normal(size=(60, 3)), axis=1)
    theta = fit_logistic(X, y, 3, l2=1.0)
    ref = LogisticRegression(C=1.0, tol=1e-12, max_iter=100_000).fit(X, y)
    Xa = np.hstack([X, np.ones((60, 1))])
    z = Xa @ theta
    ours = np.exp(z - z.max(axis=1, keepdims=True))
    ours /= ours.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(ours, ref.predict_proba(X), atol=1e-5)
    np.testing.assert_allclose(theta[:-1].T - theta[:-1].T.mean(0), ref.coef_ - ref.coef_.mean(0), atol=1e-4)


def test_logistic_separable_data_converges():
    X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0, 0, 1, 1])
    assert classifier_accuracy(X, y, 2) == 1.0


# discriminability ----------------------------------------------------------------

def test_stratified_resample_keeps_group_sizes():
    y = np.array([0] * 5 + [1] * 3 + [2] * 7)
    idx = stratified_resample(y, 0, 11)
    assert np.bincount(y[idx]).tolist() == [5, 3, 7]
    np.testing.assert_array_equal(idx, stratified_resample(y, 0, 11))


def test_duplicate_feature_adds_nothing():
    t = factor_table(0)
    dup = MetricsTable(t.model_ids, t.group_labels, t.metric_names + ["copy"],
                       np.column_stack([t.values, t.reference]), "ref")
    e = discriminability(dup, ["copy"], bootstrap_n=50, seed=1)
    assert abs(e.mean) <= 0.02


def test_separating_metric_is_discriminative():
    rng = np.random.default_rng(5)
    groups = [f"g{i % 3}" for i in range(30)]
    sep = np.array([i % 3 for i in range(30)]) + 0.1 * rng.normal(size=30)
    t = table_from([rng.normal(size=30), sep], groups=groups)
    e = discriminability(t, ["m0"], bootstrap_n=30)
    assert e.mean > 0.3 and e.sd >= 0


def test_identical_rows_have_zero_sd():
    t = table_from([np.full(12, 0.7), np.full(12, 0.4)], groups=[f"g{i % 3}" for i in range(12)])
    e = discriminability(t, ["m0"], bootstrap_n=40)
    assert e.sd == 0.0 and e.mean == 0.0


def test_discriminability_all_consistent_with_single():
    t = factor_table(1, n_metrics=5)
    entries = discriminability_all(t, max_extras=2, bootstrap_n=10, seed=3)
    assert len(entries) == 4 + 6
    single = discriminability(t, ["m02"], bootstrap_n=10, seed=3)
    match = [e for e in entries if e.feature_set == ("m02",)][0]
    np.testing.assert_array_equal(match.deltas, single.deltas)


def test_discriminability_all_jobs_invariant():
    t = factor_table(2, n_metrics=4)
    a = discriminability_all(t, bootstrap_n=8, seed=0, jobs=1)
    b = discriminability_all(t, bootstrap_n=8, seed=0, jobs=3)
    assert [e.to_dict() for e in a] == [e.to_dict() for e in b]


# residual PCA ------------------------------------------------------------------

def test_full_variance_fractions_sum_to_one():
    rng = np.random.default_rng(6)
    frac = variance_fractions(rng.normal(size=(30, 8)))
    assert frac.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(frac) <= 1e-15)


def test_rank_one_factor_exceeds_null_band():
    r = residual_pca(factor_table(0), permutations=300, bootstrap_n=50, seed=0)
    assert r.variance_fractions[0] > r.null_bands[0, 1]
    assert r.null_bands[1, 0] <= r.variance_fractions[1] <= r.null_bands[1, 1]
    assert r.bootstrap_ci[0, 0] <= r.variance_fractions[0] <= r.bootstrap_ci[0, 1]


def test_pure_noise_falls_inside_band():
    r = residual_pca(factor_table(3, strength=0.0), permutations=300, bootstrap_n=20, seed=0)
    assert r.null_bands[0, 0] <= r.variance_fractions[0] <= r.null_bands[0, 1]


def test_residual_pca_deterministic():
    t = factor_table(4, n_metrics=8)
    a = residual_pca(t, permutations=50, bootstrap_n=30, seed=9).to_dict()
    b = residual_pca(t, permutations=50, bootstrap_n=30, seed=9).to_dict()
    assert a == b
    assert a != residual_pca(t, permutations=50, bootstrap_n=30, seed=10).to_dict()


def test_residual_pca_needs_enough_metrics():
    with pytest.raises(DataError):
        residual_pca(factor_table(0, n_metrics=3), n_components=4)
