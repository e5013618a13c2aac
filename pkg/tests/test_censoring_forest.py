import numpy as np
import pytest

from src.bound_family import FunctionFamily
from src.censoring_forest import (
    ConditionalCensoring,
    ForestHyper,
    clamp_weights,
    censoring_quantile,
    censoring_survival,
    constant_weights,
    cutoff_weight_function,
    default_weight_cap,
    fit_censoring_forest,
    load_forest,
    make_weight_function,
    save_forest,
)
from src.errors import DataError, UsageError
from src.survival_data import Dataset
from tests.conftest import make_dataset


@pytest.fixture(scope="module")
def train():
    return make_dataset(200, 2, seed=21)


@pytest.fixture(scope="module")
def forest(train):
    return fit_censoring_forest(train, ForestHyper(n_trees=25, min_leaf=5), seed=4)


def separated_data(n=50):
    rng = np.random.default_rng(0)
    x = np.repeat([0.0, 1.0], n // 2)
    ctime = np.where(x == 0, 1.0, 10.0)
    otime = np.minimum(rng.exponential(20.0, size=n), ctime)
    return Dataset(X=x.reshape(-1, 1), ctime=ctime, otime=otime)


def test_depth_zero_forest_is_the_marginal_distribution(train):
    forest = fit_censoring_forest(train, ForestHyper(n_trees=5, min_leaf=1, max_depth=0), seed=0)
    X = np.array([[0.1, 0.2], [3.9, 2.0]])
    np.testing.assert_allclose(forest.weights(X), np.full((2, train.n), 1.0 / train.n))
    median = float(np.median(train.ctime))
    for t in (0.5, median, 2.0 * median):
        expected = np.mean(train.ctime >= t)
        np.testing.assert_allclose(censoring_survival(forest, X, t), expected)
    assert censoring_survival(forest, X[0], median) == pytest.approx(0.5, abs=0.05)


def test_separating_covariate():
    forest = fit_censoring_forest(separated_data(), ForestHyper(n_trees=30, min_leaf=5), seed=1)
    assert censoring_survival(forest, np.array([0.0]), 5.0) == pytest.approx(0.0, abs=0.1)
    assert censoring_survival(forest, np.array([1.0]), 5.0) == pytest.approx(1.0, abs=0.1)


def test_weights_are_a_distribution(forest):
    X = make_dataset(30, 2, seed=22).X
    weights = forest.weights(X)
    assert np.all(weights >= 0)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_survival_limits_and_monotonicity(forest, train):
    X = make_dataset(20, 2, seed=23).X
    assert np.all(censoring_survival(forest, X, -np.inf) == 1.0)
    assert np.all(censoring_survival(forest, X, train.ctime.max() * 1.01) == 0.0)
    grid = np.linspace(0.0, train.ctime.max(), 50)
    table = np.column_stack([censoring_survival(forest, X, t) for t in grid])
    assert np.all((table >= 0) & (table <= 1))
    assert np.all(np.diff(table, axis=1) <= 0)


def test_quantile_is_left_continuous_inverse():
    conditional = ConditionalCensoring(
        support=np.array([1.0, 2.0, 3.0, 4.0]),
        tails=np.array([[1.0, 0.75, 0.5, 0.25, 0.0]]),
    )
    assert conditional.quantile(0.5)[0] == 2.0
    assert conditional.quantile(0.6)[0] == 3.0
    assert conditional.quantile(1.0)[0] == 4.0
    assert conditional.survival(2.5)[0] == 0.5
    assert conditional.survival(2.0)[0] == 0.75


def test_censoring_quantile_is_monotone(forest):
    X = make_dataset(10, 2, seed=24).X
    levels = np.linspace(0.05, 0.95, 19)
    table = np.column_stack([censoring_quantile(forest, X, tau) for tau in levels])
    assert np.all(np.diff(table, axis=1) >= 0)


def test_same_seed_same_forest(train):
    hyper = ForestHyper(n_trees=8, min_leaf=5)
    first = fit_censoring_forest(train, hyper, seed=9)
    second = fit_censoring_forest(train, hyper, seed=9)
    np.testing.assert_array_equal(first.threshold, second.threshold)
    np.testing.assert_array_equal(first.train_leaves, second.train_leaves)


def test_save_and_load_are_exact(forest, tmp_path):
    path = tmp_path / "forest.npz"
    save_forest(forest, path)
    loaded = load_forest(path)
    X = make_dataset(15, 2, seed=25).X
    np.testing.assert_array_equal(loaded.weights(X), forest.weights(X))
    assert loaded.hyper == forest.hyper
    assert loaded.seed == forest.seed


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "broken.npz"
    path.write_bytes(b"not an archive")
    with pytest.raises(DataError):
        load_forest(path)


def test_too_few_rows():
    with pytest.raises(DataError):
        fit_censoring_forest(make_dataset(15, 1, seed=1), ForestHyper(min_leaf=10))


def test_hyperparameter_validation():
    with pytest.raises(UsageError):
        ForestHyper(n_trees=0)
    with pytest.raises(UsageError):
        ForestHyper(min_leaf=0)
    assert ForestHyper().resolved_mtry(10) == 4
    assert ForestHyper(mtry=20).resolved_mtry(3) == 3


def test_clamping_rule():
    np.testing.assert_array_equal(clamp_weights([0.0, 0.5, 1.0], cap=10.0), [10.0, 2.0, 1.0])
    np.testing.assert_array_equal(clamp_weights([0.5], cap=1.5), [1.5])


def test_family_weights(forest):
    family = FunctionFamily(lambda X, a: 5.0 * a * np.ones(X.shape[0]))
    weights = make_weight_function(forest, family, cap=4.0)
    X = make_dataset(12, 2, seed=26).X
    np.testing.assert_array_equal(weights(X, 0.0), np.ones(12))
    for a in (0.2, 0.5, 0.9):
        values = weights(X, a)
        assert np.all((values >= 1.0) & (values <= 4.0))
        expected = clamp_weights(censoring_survival(forest, X, 5.0 * a), 4.0)
        np.testing.assert_array_equal(values, expected)


def test_weight_steps_are_where_the_clamped_survival_moves(forest):
    X = make_dataset(6, 2, seed=28).X
    cap = 3.0
    bound = make_weight_function(forest, FunctionFamily(lambda X, a: a), cap).bind(X)
    below = np.where(np.arange(6) % 2 == 0, np.inf, np.median(forest.support))
    rows, points = bound.steps(below)
    conditional = forest.conditional(X)
    values = np.unique(forest.support)
    beyond = np.append(0.5 * (values[1:] + values[:-1]), values[-1] + 1.0)
    for r in range(6):
        expected = [
            u for u, v in zip(values, beyond)
            if u < below[r]
            and clamp_weights(conditional.survival(u)[r], cap) != clamp_weights(conditional.survival(v)[r], cap)
        ]
        if np.isinf(below[r]):
            assert len(expected) > 0
        np.testing.assert_array_equal(np.sort(points[rows == r]), expected)


def test_weights_that_ignore_the_bound_report_no_steps(forest):
    X = make_dataset(4, 2, seed=29).X
    for weights in (cutoff_weight_function(forest, c0=1.0, cap=50.0), constant_weights(2.0)):
        rows, points = weights.bind(X).steps(np.full(4, np.inf))
        assert rows.size == 0 and points.size == 0


def test_cutoff_and_constant_weights(forest):
    X = make_dataset(5, 2, seed=27).X
    cutoff = cutoff_weight_function(forest, c0=1.0, cap=50.0)
    np.testing.assert_array_equal(cutoff(X, 0.3), cutoff(X, 0.7))
    np.testing.assert_array_equal(constant_weights(2.0)(X, 0.5), np.full(5, 2.0))
    with pytest.raises(UsageError):
        cutoff_weight_function(forest, c0=1.0, cap=0.5)


def test_default_weight_cap():
    assert default_weight_cap(1) == 1.0
    assert default_weight_cap(2) == 1.0
    assert default_weight_cap(1000) == pytest.approx(np.log(1000))
