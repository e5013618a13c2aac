"""
Weighted quantiles of discrete distributions with an optional +inf atom.

The convention is the left-continuous inverse CDF: the quantile at level tau is
the smallest atom value whose cumulative normalized weight reaches tau.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

# Relative slack on cumulative-weight comparisons, absorbs float noise in cumsum.
QUANTILE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class WeightedAtoms:
    """Point masses (value, weight). Values may be +inf; weights are positive."""

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        if values.shape != weights.shape:
            raise ValueError("values and weights must have the same length")
        if values.size == 0:
            raise ValueError("at least one atom is required")
        if np.isnan(values).any():
            raise ValueError("atom values must not be NaN")
        if not np.all(weights > 0) or not np.all(np.isfinite(weights)):
            raise ValueError("atom weights must be positive and finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[float, float]]) -> "WeightedAtoms":
        pairs = list(pairs)
        return cls(
            values=np.array([v for v, _ in pairs], dtype=float),
            weights=np.array([w for _, w in pairs], dtype=float),
        )

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


def weighted_quantile(atoms: WeightedAtoms, tau: float) -> float:
    """
    Return min{v : sum of normalized weights of atoms <= v >= tau}.

    Weights are normalized internally, so callers may pass them up to a
    common positive constant.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    order = np.argsort(atoms.values, kind="stable")
    values = atoms.values[order]
    cumulative = np.cumsum(atoms.weights[order])
    total = cumulative[-1]
    index = int(np.searchsorted(cumulative, tau * total * (1.0 - QUANTILE_TOL), side="left"))
    return float(values[min(index, values.size - 1)])


def quantile_with_infinite_atom(
    scores: np.ndarray,
    weights: np.ndarray,
    tail_weights: np.ndarray,
    tau: float,
) -> np.ndarray:
    """
    Vectorized weighted_quantile of sum_i w_i delta_{V_i} + w_tail delta_{+inf},
    one quantile per entry of tail_weights.

    The finite atoms are shared; only the +inf atom's weight varies, which is the
    shape of every split-conformal correction in this package.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    tail_weights = np.atleast_1d(np.asarray(tail_weights, dtype=float))
    scores = np.asarray(scores, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if scores.size == 0:
        return np.full(tail_weights.shape, np.inf)
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    cumulative = np.cumsum(weights[order])
    totals = cumulative[-1] + tail_weights
    targets = tau * totals * (1.0 - QUANTILE_TOL)
    index = np.searchsorted(cumulative, targets, side="left")
    result = np.full(tail_weights.shape, np.inf)
    finite = index < sorted_scores.size
    result[finite] = sorted_scores[index[finite]]
    return result
