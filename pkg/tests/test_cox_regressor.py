import warnings

import numpy as np
import pytest

from src.bound_family import cox_quantile_family
from src.cox_regressor import CoxModel, breslow_baseline, fit_cox, partial_log_likelihood
from src.errors import ConvergenceWarning, DataError
from src.simulate import generate
from src.survival_data import Dataset
from tests.conftest import make_dataset


def numeric_gradient(beta, Z, times, events, h=1e-5):
    grad = np.zeros_like(beta)
    for j in range(beta.size):
        step = np.zeros_like(beta)
        step[j] = h
        up = partial_log_likelihood(beta + step, Z, times, events)[0]
        down = partial_log_likelihood(beta - step, Z, times, events)[0]
        grad[j] = (up - down) / (2 * h)
    return grad


@pytest.mark.parametrize("seed", range(50))
def test_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 31))
    p = int(rng.integers(1, 4))
    Z = rng.normal(size=(n, p))
    times = np.round(rng.exponential(size=n), 1)  # rounding creates ties
    events = rng.random(n) < 0.7
    events[0] = True
    beta = rng.normal(scale=0.5, size=p)
    _, gradient, _ = partial_log_likelihood(beta, Z, times, events)
    np.testing.assert_allclose(gradient, numeric_gradient(beta, Z, times, events), rtol=1e-5, atol=1e-6)


def test_hessian_matches_gradient_differences():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(25, 2))
    times = rng.exponential(size=25)
    events = rng.random(25) < 0.8
    beta = np.array([0.3, -0.2])
    _, _, hessian = partial_log_likelihood(beta, Z, times, events)
    h = 1e-5
    for j in range(2):
        step = np.zeros(2)
        step[j] = h
        diff = (partial_log_likelihood(beta + step, Z, times, events)[1]
                - partial_log_likelihood(beta - step, Z, times, events)[1]) / (2 * h)
        np.testing.assert_allclose(hessian[:, j], diff, rtol=1e-5, atol=1e-6)


def test_equal_covariates_give_zero_coefficient():
    data = Dataset(X=[[1.0], [1.0]], ctime=[10.0, 10.0], otime=[1.0, 2.0])
    model = fit_cox(data)
    assert model.converged
    assert model.n_iter == 0
    np.testing.assert_array_equal(model.beta, [0.0])


def test_binary_covariate_matches_grid_search(uncensored_binary):
    model = fit_cox(uncensored_binary)
    X, times, events = uncensored_binary.X, uncensored_binary.otime, uncensored_binary.events

    def loglik(b):
        return partial_log_likelihood(np.array([b]), X, times, events)[0]

    coarse = np.linspace(-5.0, 5.0, 10001)
    best = coarse[np.argmax([loglik(b) for b in coarse])]
    fine = np.linspace(best - 1e-3, best + 1e-3, 2001)
    best = fine[np.argmax([loglik(b) for b in fine])]
    assert model.converged
    assert model.coefficients[0] == pytest.approx(best, abs=1e-3)


def test_fit_is_invariant_to_affine_covariate_changes():
    data = make_dataset(80, 2, seed=3)
    moved = Dataset(X=3.0 * data.X + 7.0, ctime=data.ctime, otime=data.otime)
    first = fit_cox(data)
    second = fit_cox(moved)
    np.testing.assert_allclose(second.coefficients, first.coefficients / 3.0, rtol=1e-6)
    grid = np.linspace(0.0, 5.0, 11)
    np.testing.assert_allclose(
        second.survival(moved.X[:5], 1.0),
        first.survival(data.X[:5], 1.0),
        rtol=1e-6,
    )
    np.testing.assert_allclose(second.baseline_hazard_at(grid), first.baseline_hazard_at(grid), rtol=1e-6)


def test_baseline_is_a_nondecreasing_step_function():
    model = fit_cox(make_dataset(60, 1, seed=4))
    assert np.all(np.diff(model.cumulative_hazard) >= 0)
    assert model.baseline_hazard_at(np.array([-1.0, 0.0]))[0] == 0.0
    assert model.baseline_hazard_at(model.event_times[0]) == model.cumulative_hazard[0]
    t = np.linspace(0.0, model.event_times[-1] * 1.5, 50)
    for x in np.linspace(0.0, 4.0, 20):
        survival = model.survival(np.array([[x]]), t)
        assert np.all(np.diff(survival) <= 0)


def test_breslow_with_zero_coefficient_is_nelson_aalen():
    times = np.array([3.0, 1.0, 2.0, 2.0, 5.0])
    events = np.array([True, True, True, True, False])
    event_times, cumulative = breslow_baseline(np.zeros((5, 1)), np.zeros(1), times, events)
    np.testing.assert_array_equal(event_times, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(cumulative, [1 / 5, 1 / 5 + 2 / 4, 1 / 5 + 2 / 4 + 1 / 2])


def test_no_events_is_a_data_error():
    data = Dataset(X=[[0.0], [1.0]], ctime=[1.0, 2.0], otime=[1.0, 2.0])
    with pytest.raises(DataError, match="no uncensored events"):
        fit_cox(data)


def test_iteration_limit_warns_and_flags():
    data = make_dataset(50, 2, seed=5)
    with pytest.warns(ConvergenceWarning):
        model = fit_cox(data, max_iter=1, tol=1e-30)
    assert not model.converged
    assert model.n_iter == 1


def test_dictionary_round_trip_preserves_predictions():
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        model = fit_cox(make_dataset(40, 2, seed=6))
    loaded = CoxModel.from_dict(model.to_dict())
    X = make_dataset(10, 2, seed=7).X
    np.testing.assert_array_equal(loaded.survival(X, 1.5), model.survival(X, 1.5))
    np.testing.assert_array_equal(loaded.linear_predictor(X), model.linear_predictor(X))


def test_dimension_mismatch():
    model = fit_cox(make_dataset(30, 2, seed=8))
    with pytest.raises(DataError, match="dimension"):
        model.linear_predictor(np.zeros((1, 3)))


@pytest.mark.parametrize("seed, p", [(seed, 1 + seed % 3) for seed in range(12)])
def test_accepted_newton_steps_never_lower_the_likelihood(seed, p):
    data = make_dataset(60, p, seed=seed, censor_scale=2.0)
    model = fit_cox(data)
    path = np.asarray(model.extra["log_likelihood_path"])
    assert path.size == model.n_iter + 1
    assert path[-1] == model.log_likelihood
    slack = 1e-12 * np.maximum(1.0, np.abs(path[:-1]))
    assert np.all(np.diff(path) >= -slack)


def test_strong_effect_fit_climbs_monotonically():
    rng = np.random.default_rng(11)
    x = rng.uniform(0.0, 4.0, size=80)
    true_time = rng.exponential(scale=np.exp(-2.5 * x))
    data = Dataset(X=x.reshape(-1, 1), ctime=np.full(80, 50.0), otime=true_time)
    model = fit_cox(data)
    assert model.converged
    assert np.all(np.diff(model.extra["log_likelihood_path"]) >= -1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_survival_is_a_probability_nonincreasing_in_time(seed):
    data = make_dataset(70, 2, seed=20 + seed)
    model = fit_cox(data)
    X = np.random.default_rng(seed).uniform(-2.0, 6.0, size=(25, 2))
    grid = np.concatenate([[-1.0, 0.0], np.linspace(0.0, 2.0 * model.event_times[-1], 120)])
    table = np.column_stack([model.survival(X, t) for t in grid])
    assert np.all((table >= 0.0) & (table <= 1.0))
    assert np.all(np.diff(table, axis=1) <= 0.0)
    np.testing.assert_array_equal(table[:, 0], 1.0)


def test_setting_one_conditional_median_tracks_the_lognormal_median():
    oracle = np.exp(0.632 * 2.0)
    medians = []
    for seed in range(20):
        model = fit_cox(generate(1, 1000, seed=seed))
        medians.append(cox_quantile_family(model)(np.array([[2.0]]), 0.5)[0])
    assert abs(np.mean(medians) / oracle - 1.0) <= 0.15
