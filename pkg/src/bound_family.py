"""
Monotone families of lower bounds a -> f_a(x).

A family maps covariate rows X and a level a in [0, 1] to one extended real per
row, nondecreasing in a for every row, with f_0 = -inf. Families are bound to a
fixed covariate matrix with `bind(X)` so that repeated evaluation over many
levels (calibration, knot search) reuses per-row state.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from typing import Any, Callable, Optional

import numpy as np

from src.censoring_forest import CensoringForest, censoring_quantile
from src.cox_regressor import CoxModel
from src.errors import UsageError

QUANTILE_T = "quantile-T"
CT_TRUNCATED = "ct-truncated"


def check_levels(a) -> np.ndarray:
    """Validate levels in [0, 1]; returns them as a float array."""
    levels = np.asarray(a, dtype=float)
    if np.isnan(levels).any() or (levels < 0).any() or (levels > 1).any():
        raise UsageError(f"level a must lie in [0, 1], got {a}")
    return levels


class BoundFamily:
    """A family restricted to fixed covariate rows: a -> (f_a(x_1), ..., f_a(x_n))."""

    def __init__(self, family: "MonotoneBoundFamily", state: Any, n: int):
        self.family = family
        self.state = state
        self.n = n

    def __call__(self, a) -> np.ndarray:
        """a is a scalar or one level per row."""
        levels = np.broadcast_to(check_levels(a), (self.n,))
        values = np.asarray(self.family._evaluate(self.state, levels), dtype=float).copy()
        values[levels == 0] = -np.inf
        return values

    def saturated(self, a) -> np.ndarray:
        levels = np.broadcast_to(check_levels(a), (self.n,))
        return self.family._saturated(self.state, levels)


class MonotoneBoundFamily(ABC):
    """Base class for (X, a) -> f_a(X), nondecreasing in a."""

    kind: str = QUANTILE_T

    @abstractmethod
    def _prepare(self, X: np.ndarray) -> Any:
        """Per-row state reused across levels."""

    @abstractmethod
    def _evaluate(self, state: Any, levels: np.ndarray) -> np.ndarray:
        """Values for one level per row; the a == 0 convention is applied by the caller."""

    def _saturated(self, state: Any, levels: np.ndarray) -> np.ndarray:
        return np.zeros(levels.shape, dtype=bool)

    def bind(self, X) -> BoundFamily:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return BoundFamily(self, self._prepare(X), X.shape[0])

    def __call__(self, X, a) -> np.ndarray:
        return self.bind(X)(a)

    def saturated(self, X, a) -> np.ndarray:
        """True where the level lies beyond the support of the fitted distribution."""
        return self.bind(X).saturated(a)


class CoxQuantileFamily(MonotoneBoundFamily):
    """
    q_a(x) = inf{t : 1 - S(t|x) >= a} for a fitted Cox model.

    S(t|x) >= ... is compared on the hazard scale, Lambda_0(t) * r(x) >= -log(1 - a),
    so the value is the first event time whose cumulative hazard reaches the
    target. Levels past the last jump saturate at the largest event time.
    """

    kind = QUANTILE_T

    def __init__(self, model: CoxModel):
        self.model = model

    def _prepare(self, X: np.ndarray) -> np.ndarray:
        return self.model.relative_risk(X)

    def _index(self, risk: np.ndarray, levels: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            target = -np.log1p(-levels) / risk
        return np.searchsorted(self.model.cumulative_hazard, target, side="left")

    def _evaluate(self, state: np.ndarray, levels: np.ndarray) -> np.ndarray:
        index = self._index(state, levels)
        return self.model.event_times[np.minimum(index, self.model.event_times.size - 1)]

    def _saturated(self, state: np.ndarray, levels: np.ndarray) -> np.ndarray:
        return self._index(state, levels) >= self.model.event_times.size


class TruncatedFamily(MonotoneBoundFamily):
    """f_a(x) = min(base_a(x), truncation(x))."""

    kind = CT_TRUNCATED

    def __init__(
        self,
        base: MonotoneBoundFamily,
        truncation: Callable[[np.ndarray], np.ndarray],
        beta: Optional[float] = None,
    ):
        self.base = base
        self.truncation = truncation
        self.beta = beta

    def _prepare(self, X: np.ndarray):
        return self.base._prepare(X), np.asarray(self.truncation(X), dtype=float)

    def _evaluate(self, state, levels: np.ndarray) -> np.ndarray:
        base_state, cap = state
        return np.minimum(self.base._evaluate(base_state, levels), cap)

    def _saturated(self, state, levels: np.ndarray) -> np.ndarray:
        base_state, cap = state
        # where the cap binds, the value is the cap rather than the saturated base
        return self.base._saturated(base_state, levels) & (self.base._evaluate(base_state, levels) <= cap)


class ForestTruncation:
    """x -> conditional tau-quantile of C given x under a censoring forest."""

    def __init__(self, forest: CensoringForest, tau: float):
        self.forest = forest
        self.tau = tau

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return censoring_quantile(self.forest, X, self.tau)


class RearrangedFamily(MonotoneBoundFamily):
    """Sorted raw outputs on a level grid, linearly interpolated in a, flat beyond the ends."""

    def __init__(self, raw: Callable[[np.ndarray, float], np.ndarray], grid, kind: str = QUANTILE_T):
        grid = np.asarray(grid, dtype=float).ravel()
        if grid.size == 0:
            raise ValueError("rearrangement grid must not be empty")
        check_levels(grid)
        if np.any(np.diff(grid) < 0):
            raise ValueError("rearrangement grid must be sorted ascending")
        self.raw = raw
        self.grid = grid
        self.kind = kind

    def _prepare(self, X: np.ndarray) -> np.ndarray:
        columns = [np.broadcast_to(np.asarray(self.raw(X, float(g)), dtype=float), (X.shape[0],)) for g in self.grid]
        return np.sort(np.column_stack(columns), axis=1)

    def _evaluate(self, state: np.ndarray, levels: np.ndarray) -> np.ndarray:
        size = self.grid.size
        if size == 1:
            return state[:, 0].copy()
        rows = np.arange(state.shape[0])
        clipped = np.clip(levels, self.grid[0], self.grid[-1])
        hi = np.clip(np.searchsorted(self.grid, clipped, side="left"), 1, size - 1)
        lo = hi - 1
        span = self.grid[hi] - self.grid[lo]
        frac = np.where(span > 0, (clipped - self.grid[lo]) / np.where(span > 0, span, 1.0), 1.0)
        low, high = state[rows, lo], state[rows, hi]
        with np.errstate(invalid="ignore"):
            mixed = np.minimum(low + frac * (high - low), high)
        return np.where(frac <= 0, low, np.where(frac >= 1, high, mixed))


class FunctionFamily(MonotoneBoundFamily):
    """Wraps func(X, levels) -> values; the caller vouches for monotonicity."""

    def __init__(self, func: Callable[[np.ndarray, np.ndarray], np.ndarray], kind: str = QUANTILE_T):
        self.func = func
        self.kind = kind

    def _prepare(self, X: np.ndarray) -> np.ndarray:
        return X

    def _evaluate(self, state: np.ndarray, levels: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.func(state, levels), dtype=float), levels.shape)


def cox_quantile_family(model: CoxModel) -> CoxQuantileFamily:
    return CoxQuantileFamily(model)


def rearrange_monotone(raw: Callable[[np.ndarray, float], np.ndarray], grid) -> RearrangedFamily:
    """Restore monotonicity in a of an arbitrary quantile estimator by sorting its grid outputs."""
    return RearrangedFamily(raw, grid)


def truncation_level(n_cal: int) -> float:
    """beta = 1 / log(n_cal), kept within (0, 0.5] for small folds."""
    if n_cal <= 1:
        return 0.5
    return min(0.5, 1.0 / math.log(n_cal))


def truncate_family(family: MonotoneBoundFamily, forest: CensoringForest, beta: float) -> TruncatedFamily:
    """Cap a family at the conditional (1 - beta)-quantile of the censoring time."""
    if not 0.0 < beta < 1.0:
        raise UsageError(f"truncation beta must lie in (0, 1), got {beta}")
    return TruncatedFamily(family, ForestTruncation(forest, 1.0 - beta), beta=beta)
