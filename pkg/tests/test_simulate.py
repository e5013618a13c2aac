import numpy as np
import pytest
from scipy import stats

from src.errors import UsageError
from src.simulate import SETTINGS, generate, generate_conditional, get_setting, oracle_quantile
from src.survival_data import write_dataset


@pytest.mark.parametrize("setting", sorted(SETTINGS))
def test_observed_time_is_the_minimum(setting):
    data = generate(setting, 500, seed=setting)
    assert data.p == SETTINGS[setting].p
    np.testing.assert_array_equal(data.otime, np.minimum(data.true_time, data.ctime))
    assert np.all((data.X >= 0) & (data.X <= 4))


def test_setting_one_log_mean():
    data = generate(1, 2000, seed=0)
    residual = np.log(data.true_time) - 0.632 * data.X[:, 0]
    assert abs(residual.mean()) <= 3 * 2 / np.sqrt(2000)


def test_setting_three_censoring_mean_near_four():
    data = generate_conditional(3, np.full((10_000, 1), 4.0), seed=1)
    assert data.ctime.mean() == pytest.approx(1 / 0.35, rel=0.1)


@pytest.mark.parametrize("setting, x", [(3, 0.5), (4, 3.0), (5, None)])
def test_censoring_matches_its_law(setting, x):
    spec = get_setting(setting)
    point = np.full(spec.p, 2.0) if x is None else np.array([x])
    data = generate_conditional(setting, np.tile(point, (5000, 1)), seed=7)
    result = stats.kstest(data.ctime, spec.censoring(point).cdf)
    assert result.pvalue > 0.01


def test_survival_time_matches_lognormal():
    data = generate_conditional(6, np.tile(np.full(10, 1.0), (5000, 1)), seed=8)
    mu = 0.126 * (1.0 + 1.0) + 1.0
    sigma = (1.0 + 2.0) / 4.0
    result = stats.kstest(np.log(data.true_time), stats.norm(loc=mu, scale=sigma).cdf)
    assert result.pvalue > 0.01


def test_oracle_quantiles():
    assert oracle_quantile(1, [1.0], 0.5) == pytest.approx(np.exp(0.632))
    assert oracle_quantile(1, [0.0], 0.1) == pytest.approx(np.exp(2 * stats.norm.ppf(0.1)))
    assert oracle_quantile(1, [0.0], 0.1) == pytest.approx(np.exp(-2.5631), rel=1e-4)
    assert oracle_quantile(2, [3.0], 0.5) == pytest.approx(np.exp(3.0))
    assert oracle_quantile(4, [1.0], 0.5) == pytest.approx(np.exp(1.5))
    x = np.array([1.0, 2.0, 4.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    expected = np.exp(0.126 * (1.0 + 2.0) + 1.0 + 1.0 * stats.norm.ppf(0.3))
    assert oracle_quantile(6, x, 0.3) == pytest.approx(expected)


def test_oracle_symmetry_and_matrix_input():
    X = np.array([[0.5], [2.5], [3.9]])
    low = oracle_quantile(2, X, 0.2)
    high = oracle_quantile(2, X, 0.8)
    mu = np.where(X[:, 0] > 2, 3.0, X[:, 0])
    np.testing.assert_allclose(low * high, np.exp(2 * mu))
    assert low.shape == (3,)


def test_oracle_rejects_bad_level_and_dimension():
    with pytest.raises(UsageError):
        oracle_quantile(1, [1.0], 1.0)
    with pytest.raises(UsageError):
        oracle_quantile(5, [1.0], 0.5)


def test_generation_is_deterministic(tmp_path):
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_dataset(generate(3, 200, seed=7), first)
    write_dataset(generate(3, 200, seed=7), second)
    assert first.read_bytes() == second.read_bytes()
    assert not np.array_equal(generate(3, 50, seed=7).otime, generate(3, 50, seed=8).otime)


def test_unknown_setting_and_bad_size():
    with pytest.raises(UsageError):
        get_setting(9)
    with pytest.raises(UsageError):
        generate(1, 0, seed=0)
