"""
Censoring model: a quantile regression forest on the observed censoring times.

Under Type I censoring C is seen for every unit, so P(C >= t | X = x) can be
estimated directly. Trees are grown by scikit-learn (bootstrap, CART variance
splits on ctime, mtry feature subsampling) and then frozen into plain arrays.
The conditional distribution at x puts weight

    w_i(x) = (1/B) * sum_b 1{leaf_b(X_i) = leaf_b(x)} / |{j : leaf_b(X_j) = leaf_b(x)}|

on each training censoring time C_i, with leaf membership taken on the original
(not bootstrapped) training rows.
"""

from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterator, Optional, Tuple

import numpy as np
from scipy import sparse
from sklearn.ensemble import RandomForestRegressor

from src.errors import DataError, UsageError
from src.logging_helper import Log
from src.survival_data import Dataset, sklearn_seed
from src.weighted_quantile import QUANTILE_TOL

if TYPE_CHECKING:
    from src.bound_family import MonotoneBoundFamily

CHUNK_ROWS = 1024
LEAF = -1


@dataclass(frozen=True)
class ForestHyper:
    """Forest hyperparameters. mtry=None means ceil(p/3); max_depth=None means unbounded."""

    n_trees: int = 200
    min_leaf: int = 10
    max_depth: Optional[int] = None
    mtry: Optional[int] = None
    n_jobs: Optional[int] = None

    def __post_init__(self):
        if self.n_trees < 1:
            raise UsageError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_leaf < 1:
            raise UsageError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.max_depth is not None and self.max_depth < 0:
            raise UsageError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.mtry is not None and self.mtry < 1:
            raise UsageError(f"mtry must be >= 1, got {self.mtry}")

    def resolved_mtry(self, p: int) -> int:
        if self.mtry is None:
            return max(1, math.ceil(p / 3))
        return min(self.mtry, p)


@dataclass(frozen=True, eq=False)
class ConditionalCensoring:
    """
    Forest conditional distributions of C for a block of query rows.

    tails[r, k] = P(C >= support[k] | x_r) with support sorted ascending and a
    final column of zeros, so tails[r, searchsorted(support, t)] = P(C >= t | x_r).
    """

    support: np.ndarray
    tails: np.ndarray

    @property
    def m(self) -> int:
        return int(self.tails.shape[0])

    def survival(self, t) -> np.ndarray:
        """P(C >= t | x_r); t is a scalar or one value per row."""
        t = np.broadcast_to(np.asarray(t, dtype=float), (self.m,))
        index = np.searchsorted(self.support, t, side="left")
        return self.tails[np.arange(self.m), index]

    def quantile(self, tau: float) -> np.ndarray:
        """Left-continuous inverse of the conditional CDF at tau."""
        if not 0.0 <= tau <= 1.0:
            raise UsageError(f"tau must lie in [0, 1], got {tau}")
        cdf = 1.0 - self.tails[:, 1:]
        index = np.sum(cdf < tau * (1.0 - QUANTILE_TOL), axis=1)
        return self.support[np.minimum(index, self.support.size - 1)]


@dataclass(frozen=True, eq=False)
class CensoringForest:
    """
    Frozen forest. Node arrays of all trees are concatenated; tree b owns nodes
    tree_offsets[b]:tree_offsets[b+1] and its child indices are local to the tree.
    train_leaves[b, i] is the local leaf of training row i in tree b.
    response[i] is the training target of row i: ctime for the censoring forest,
    the observed time for an event-time forest.
    """

    tree_offsets: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    train_leaves: np.ndarray
    response: np.ndarray
    p: int
    hyper: ForestHyper = ForestHyper()
    seed: int = 0

    @property
    def n_trees(self) -> int:
        return int(self.tree_offsets.size - 1)

    @property
    def n_train(self) -> int:
        return int(self.response.size)

    @cached_property
    def _order(self) -> np.ndarray:
        return np.argsort(self.response, kind="stable")

    @cached_property
    def support(self) -> np.ndarray:
        return self.response[self._order]

    @cached_property
    def _membership(self) -> sparse.csr_matrix:
        """(total nodes) x (training rows in response order), entries 1/|leaf|."""
        n = self.n_train
        rank = np.empty(n, dtype=np.int64)
        rank[self._order] = np.arange(n)
        rows = (self.train_leaves + self.tree_offsets[:-1, None]).ravel()
        cols = np.tile(rank, self.n_trees)
        total = int(self.tree_offsets[-1])
        counts = np.bincount(rows, minlength=total)
        return sparse.csr_matrix((1.0 / counts[rows], (rows, cols)), shape=(total, n))

    def _check_dimension(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.p:
            raise DataError(f"dimension mismatch: forest expects {self.p} covariates, got {X.shape[1]}")
        return X

    def apply(self, X) -> np.ndarray:
        """Local leaf index of every row in every tree, shape (m, n_trees)."""
        # same float32 comparison as the fitted sklearn trees
        X = self._check_dimension(X).astype(np.float32)
        leaves = np.zeros((X.shape[0], self.n_trees), dtype=np.int64)
        for b in range(self.n_trees):
            start = self.tree_offsets[b]
            stop = self.tree_offsets[b + 1]
            feature = self.feature[start:stop]
            threshold = self.threshold[start:stop]
            left = self.left[start:stop]
            right = self.right[start:stop]
            node = np.zeros(X.shape[0], dtype=np.int64)
            active = np.flatnonzero(left[node] != LEAF)
            while active.size:
                current = node[active]
                go_left = X[active, feature[current]] <= threshold[current]
                node[active] = np.where(go_left, left[current], right[current])
                active = active[left[node[active]] != LEAF]
            leaves[:, b] = node
        return leaves

    def sorted_weights(self, X: np.ndarray) -> np.ndarray:
        """Conditional-distribution weights over training rows in response order."""
        X = self._check_dimension(X)
        leaves = self.apply(X) + self.tree_offsets[:-1]
        m = leaves.shape[0]
        query = sparse.csr_matrix(
            (np.full(leaves.size, 1.0 / self.n_trees), (np.repeat(np.arange(m), self.n_trees), leaves.ravel())),
            shape=(m, int(self.tree_offsets[-1])),
        )
        return (query @ self._membership).toarray()

    def weights(self, X) -> np.ndarray:
        """Conditional-distribution weights over training rows (original order), shape (m, n)."""
        X = self._check_dimension(X)
        rank = np.empty(self.n_train, dtype=np.int64)
        rank[self._order] = np.arange(self.n_train)
        return self.sorted_weights(X)[:, rank]

    def conditional(self, X) -> ConditionalCensoring:
        X = self._check_dimension(X)
        weights = self.sorted_weights(X)
        tails = np.zeros((X.shape[0], self.n_train + 1))
        tails[:, :-1] = np.cumsum(weights[:, ::-1], axis=1)[:, ::-1]
        tails[:, 0] = 1.0
        tails = np.minimum.accumulate(np.clip(tails, 0.0, 1.0), axis=1)
        return ConditionalCensoring(support=self.support, tails=tails)

    def iter_conditional(self, X, chunk_rows: int = CHUNK_ROWS) -> Iterator[ConditionalCensoring]:
        X = self._check_dimension(X)
        for start in range(0, X.shape[0], chunk_rows):
            yield self.conditional(X[start:start + chunk_rows])

    def to_arrays(self) -> dict:
        return {
            "tree_offsets": self.tree_offsets,
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left,
            "right": self.right,
            "train_leaves": self.train_leaves,
            "response": self.response,
            "p": np.array(self.p),
            "seed": np.array(str(self.seed)),
            "hyper": np.array(json.dumps(asdict(self.hyper))),
        }


def _single_leaf_forest(X: np.ndarray, response: np.ndarray, hyper: ForestHyper, seed: int) -> CensoringForest:
    b = hyper.n_trees
    return CensoringForest(
        tree_offsets=np.arange(b + 1, dtype=np.int64),
        feature=np.full(b, -2, dtype=np.int64),
        threshold=np.full(b, -2.0),
        left=np.full(b, LEAF, dtype=np.int64),
        right=np.full(b, LEAF, dtype=np.int64),
        train_leaves=np.zeros((b, X.shape[0]), dtype=np.int64),
        response=np.array(response, dtype=float),
        p=X.shape[1],
        hyper=hyper,
        seed=seed,
    )


def grow_quantile_forest(X: np.ndarray, response: np.ndarray, hyper: ForestHyper, seed: int) -> CensoringForest:
    """Grow a quantile regression forest of response on X and freeze it; deterministic given seed."""
    if hyper.max_depth == 0:
        return _single_leaf_forest(X, response, hyper, seed)
    regressor = RandomForestRegressor(
        n_estimators=hyper.n_trees,
        criterion="squared_error",
        max_depth=hyper.max_depth,
        min_samples_leaf=hyper.min_leaf,
        max_features=hyper.resolved_mtry(X.shape[1]),
        bootstrap=True,
        random_state=sklearn_seed(seed),
        n_jobs=hyper.n_jobs,
    )
    regressor.fit(X, response)
    offsets = [0]
    features, thresholds, lefts, rights, leaves = [], [], [], [], []
    for estimator in regressor.estimators_:
        tree = estimator.tree_
        features.append(np.asarray(tree.feature, dtype=np.int64))
        thresholds.append(np.asarray(tree.threshold, dtype=float))
        lefts.append(np.asarray(tree.children_left, dtype=np.int64))
        rights.append(np.asarray(tree.children_right, dtype=np.int64))
        leaves.append(np.asarray(estimator.apply(X.astype(np.float32)), dtype=np.int64))
        offsets.append(offsets[-1] + tree.node_count)
    return CensoringForest(
        tree_offsets=np.asarray(offsets, dtype=np.int64),
        feature=np.concatenate(features),
        threshold=np.concatenate(thresholds),
        left=np.concatenate(lefts),
        right=np.concatenate(rights),
        train_leaves=np.vstack(leaves),
        response=np.array(response, dtype=float),
        p=X.shape[1],
        hyper=hyper,
        seed=seed,
    )


def fit_censoring_forest(train: Dataset, hyper: Optional[ForestHyper] = None, seed: int = 0) -> CensoringForest:
    """Grow a quantile regression forest of ctime on X; deterministic given seed."""
    hyper = hyper or ForestHyper()
    Log.section("Censoring Forest")
    if train.n < 2 * hyper.min_leaf:
        raise DataError(f"censoring forest needs at least 2*min_leaf={2 * hyper.min_leaf} rows, got {train.n}")

    forest = grow_quantile_forest(train.X, train.ctime, hyper, seed)
    Log.kv({
        "stage": "forest_fit",
        "result": "success",
        "n": train.n,
        "trees": forest.n_trees,
        "nodes": int(forest.tree_offsets[-1]),
        "mtry": hyper.resolved_mtry(train.p),
        "seed": seed,
    })
    return forest


def censoring_survival(forest: CensoringForest, x, t):
    """P(C >= t | X = x). A single covariate vector gives a float, a matrix one value per row."""
    single = np.ndim(x) == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), (X.shape[0],))
    values = np.empty(X.shape[0])
    for start, block in zip(range(0, X.shape[0], CHUNK_ROWS), forest.iter_conditional(X)):
        values[start:start + block.m] = block.survival(t[start:start + block.m])
    return float(values[0]) if single else values


def censoring_quantile(forest: CensoringForest, x, tau: float):
    """Conditional tau-quantile of C given X = x (left-continuous inverse CDF)."""
    single = np.ndim(x) == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    values = np.concatenate([block.quantile(tau) for block in forest.iter_conditional(X)]) if X.shape[0] else np.zeros(0)
    return float(values[0]) if single else values


def save_forest(forest: CensoringForest, path) -> None:
    np.savez_compressed(Path(path), **forest.to_arrays())


def load_forest(path) -> CensoringForest:
    try:
        with np.load(Path(path), allow_pickle=False) as archive:
            hyper = ForestHyper(**json.loads(str(archive["hyper"])))
            return CensoringForest(
                tree_offsets=archive["tree_offsets"].astype(np.int64),
                feature=archive["feature"].astype(np.int64),
                threshold=archive["threshold"].astype(float),
                left=archive["left"].astype(np.int64),
                right=archive["right"].astype(np.int64),
                train_leaves=archive["train_leaves"].astype(np.int64),
                response=archive["response"].astype(float),
                p=int(archive["p"]),
                hyper=hyper,
                seed=int(str(archive["seed"])),
            )
    except (OSError, KeyError, ValueError) as err:
        raise DataError(f"could not read forest file {path}: {err}")


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

def clamp_weights(survival, cap: float) -> np.ndarray:
    """w = min(1 / max(s, 1/cap), cap); always within [1, cap] for s in [0, 1]."""
    survival = np.asarray(survival, dtype=float)
    return np.minimum(1.0 / np.maximum(survival, 1.0 / cap), cap)


def _no_steps() -> Tuple[np.ndarray, np.ndarray]:
    return np.zeros(0, dtype=np.int64), np.zeros(0)


class BoundWeights:
    """Weights for fixed rows as a function of the level a (scalar or one per row)."""

    def __call__(self, a) -> np.ndarray:
        raise NotImplementedError

    def steps(self, below: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        (row, t) pairs where the row's weight changes as its bound passes above t,
        for t < below[row]. Weights that never move with the bound report none.
        """
        return _no_steps()


class WeightFunction(ABC):
    """(X, a) -> positive weights, bounded above by cap."""

    def __init__(self, cap: float):
        if not cap >= 1.0:
            raise UsageError(f"weight cap must be >= 1, got {cap}")
        self.cap = float(cap)

    @abstractmethod
    def bind(self, X) -> BoundWeights:
        """Weights for fixed rows as a function of the level a."""

    def __call__(self, X, a) -> np.ndarray:
        return self.bind(X)(a)


class _FamilyWeights(BoundWeights):
    def __init__(self, conditional: ConditionalCensoring, bound, cap: float):
        self.conditional = conditional
        self.bound = bound
        self.cap = cap

    def __call__(self, a) -> np.ndarray:
        return clamp_weights(self.conditional.survival(self.bound(a)), self.cap)

    def steps(self, below: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        support = self.conditional.support
        if support.size == 0:
            return _no_steps()
        # survival is constant on (u_{j-1}, u_j] over the distinct support values u
        values, first = np.unique(support, return_index=True)
        after = np.append(first[1:], support.size)
        tails = self.conditional.tails
        moves = clamp_weights(tails[:, first], self.cap) != clamp_weights(tails[:, after], self.cap)
        moves &= values[None, :] < np.asarray(below, dtype=float)[:, None]
        rows, cols = np.nonzero(moves)
        return rows.astype(np.int64), values[cols]


class _StaticWeights(BoundWeights):
    def __init__(self, values: np.ndarray):
        self.values = values

    def __call__(self, a) -> np.ndarray:
        return self.values.copy()


class _CallableWeights(BoundWeights):
    def __init__(self, func: Callable[[np.ndarray, object], np.ndarray], X: np.ndarray):
        self.func = func
        self.X = X

    def __call__(self, a) -> np.ndarray:
        n = self.X.shape[0]
        return np.broadcast_to(np.asarray(self.func(self.X, a), dtype=float), (n,)).copy()


class CensoringWeights(WeightFunction):
    """w_a(x) = 1 / P(C >= f_a(x) | x), clamped to [1, cap]."""

    def __init__(self, forest: CensoringForest, family: "MonotoneBoundFamily", cap: float):
        super().__init__(cap)
        self.forest = forest
        self.family = family

    def bind(self, X) -> _FamilyWeights:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return _FamilyWeights(self.forest.conditional(X), self.family.bind(X), self.cap)


class CutoffWeights(WeightFunction):
    """w(x) = 1 / P(C >= c0 | x), clamped to [1, cap]; independent of a."""

    def __init__(self, forest: CensoringForest, c0: float, cap: float):
        super().__init__(cap)
        self.forest = forest
        self.c0 = float(c0)

    def bind(self, X) -> _StaticWeights:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        survival = censoring_survival(self.forest, X, self.c0) if X.shape[0] else np.zeros(0)
        return _StaticWeights(clamp_weights(survival, self.cap))


class FunctionWeights(WeightFunction):
    """
    Weights given by func(X, a); the caller keeps them within [1, cap]. They
    report no steps, so calibration treats them as moving only where the
    coverage indicators do.
    """

    def __init__(self, func: Callable[[np.ndarray, object], np.ndarray], cap: float):
        super().__init__(cap)
        self.func = func

    def bind(self, X) -> _CallableWeights:
        return _CallableWeights(self.func, np.atleast_2d(np.asarray(X, dtype=float)))


def make_weight_function(forest: CensoringForest, family: "MonotoneBoundFamily", cap: float) -> CensoringWeights:
    return CensoringWeights(forest, family, cap)


def cutoff_weight_function(forest: CensoringForest, c0: float, cap: float) -> CutoffWeights:
    return CutoffWeights(forest, c0, cap)


def constant_weights(value: float = 1.0) -> FunctionWeights:
    return FunctionWeights(lambda X, a: np.full(X.shape[0], float(value)), cap=max(1.0, float(value)))


def default_weight_cap(n_cal: int) -> float:
    """max(1, log n_cal)."""
    return max(1.0, math.log(n_cal)) if n_cal > 1 else 1.0
