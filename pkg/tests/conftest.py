"""Shared fixtures and the hypothesis profile."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from src.logging_helper import Log
from src.survival_data import Dataset

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture(autouse=True)
def quiet_log():
    Log.set_quiet(True)
    yield
    Log.set_quiet(False)


@pytest.fixture
def uncensored_binary():
    """One binary covariate, every unit an event."""
    X = np.array([[0.0], [0.0], [0.0], [1.0], [1.0], [1.0], [0.0], [1.0]])
    times = np.array([1.0, 3.0, 5.0, 0.5, 2.0, 2.5, 4.0, 1.5])
    return Dataset(X=X, ctime=np.full(8, 100.0), otime=times, true_time=times)


def make_dataset(n: int, p: int, seed: int, censor_scale: float = 3.0) -> Dataset:
    """Small random dataset for numerical tests."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 4.0, size=(n, p))
    true_time = rng.exponential(scale=np.exp(0.3 * X[:, 0]))
    ctime = rng.exponential(scale=censor_scale, size=n)
    return Dataset(X=X, ctime=ctime, otime=np.minimum(true_time, ctime), true_time=true_time)
