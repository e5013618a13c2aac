"""
Censored quantile regression forest for the event time.

A forest of the observed time T~ on X supplies neighbourhood weights w_i(x) over
the training rows. Censored rows carry no mass; an observed event carries the
inverse of its estimated censoring survival, so

    F(t | x) = sum_i w_i(x) * 1{T~_i <= t, event_i} / P(C >= T~_i | X_i)

and the bound at level a is inf{t : F(t | x) >= a}. The bound is not
calibrated and serves as a comparison method.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from src.bound_family import MonotoneBoundFamily
from src.censoring_forest import (
    CHUNK_ROWS,
    CensoringForest,
    ForestHyper,
    censoring_survival,
    clamp_weights,
    grow_quantile_forest,
    load_forest,
)
from src.errors import DataError
from src.logging_helper import Log
from src.survival_data import Dataset
from src.weighted_quantile import QUANTILE_TOL

FOREST_QUANTILE = "forest-quantile"


class ForestQuantileFamily(MonotoneBoundFamily):
    """a -> inf{t : F(t | x) >= a} under the IPCW forest estimate of F; saturates at the largest event time."""

    kind = FOREST_QUANTILE

    def __init__(self, forest: CensoringForest, mass):
        mass = np.asarray(mass, dtype=float)
        if mass.shape != forest.response.shape:
            raise DataError(f"event mass has {mass.size} entries for {forest.n_train} training rows")
        observed = mass > 0
        if not observed.any():
            raise DataError("event forest needs at least one observed event")
        self.forest = forest
        self.mass = mass
        self.top = float(forest.response[observed].max())
        self._sorted_mass = mass[np.argsort(forest.response, kind="stable")]

    def _prepare(self, X: np.ndarray) -> np.ndarray:
        blocks = [
            np.cumsum(self.forest.sorted_weights(X[start:start + CHUNK_ROWS]) * self._sorted_mass, axis=1)
            for start in range(0, X.shape[0], CHUNK_ROWS)
        ]
        return np.vstack(blocks) if blocks else np.zeros((0, self.forest.n_train))

    def _index(self, cdf: np.ndarray, levels: np.ndarray) -> np.ndarray:
        return np.sum(cdf < levels[:, None] * (1.0 - QUANTILE_TOL), axis=1)

    def _evaluate(self, state: np.ndarray, levels: np.ndarray) -> np.ndarray:
        index = self._index(state, levels)
        support = self.forest.support
        values = support[np.minimum(index, support.size - 1)]
        return np.where(index >= support.size, self.top, values)

    def _saturated(self, state: np.ndarray, levels: np.ndarray) -> np.ndarray:
        return self._index(state, levels) >= self.forest.n_train


def event_mass(train: Dataset, censoring: CensoringForest, cap: float) -> np.ndarray:
    """1 / P(C >= T~_i | X_i), clamped at cap, for observed events; 0 for censored rows."""
    survival = censoring_survival(censoring, train.X, train.otime)
    return np.where(train.events, clamp_weights(survival, cap), 0.0)


def fit_event_forest(
    train: Dataset,
    censoring: CensoringForest,
    hyper: Optional[ForestHyper] = None,
    seed: int = 0,
    cap: Optional[float] = None,
) -> ForestQuantileFamily:
    """Grow the forest of T~ on X and attach the IPCW event masses; cap defaults to n_train."""
    hyper = hyper or ForestHyper()
    Log.section("Event Forest")
    if train.n < 2 * hyper.min_leaf:
        raise DataError(f"event forest needs at least 2*min_leaf={2 * hyper.min_leaf} rows, got {train.n}")
    if not train.events.any():
        raise DataError("event forest needs at least one observed event")
    cap = float(max(1, train.n)) if cap is None else float(cap)
    mass = event_mass(train, censoring, cap)
    forest = grow_quantile_forest(train.X, train.otime, hyper, seed)
    Log.kv({
        "stage": "event_forest_fit",
        "result": "success",
        "n": train.n,
        "events": int(train.events.sum()),
        "trees": forest.n_trees,
        "max_mass": f"{mass.max():.6g}",
        "seed": seed,
    })
    return ForestQuantileFamily(forest, mass)


def save_event_family(family: ForestQuantileFamily, path) -> None:
    np.savez_compressed(Path(path), mass=family.mass, **family.forest.to_arrays())


def load_event_family(path) -> ForestQuantileFamily:
    forest = load_forest(path)
    try:
        with np.load(Path(path), allow_pickle=False) as archive:
            mass = archive["mass"].astype(float)
    except (OSError, KeyError, ValueError) as err:
        raise DataError(f"could not read event forest file {path}: {err}")
    return ForestQuantileFamily(forest, mass)
