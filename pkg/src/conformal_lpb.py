"""
Lower predictive bounds (LPBs) for survival times from censored data.

Constructions:
  - baseline: split-conformal correction of q_alpha(x) using scores q_alpha(X_i) - T~_i
  - fixed: weighted conformal on the units with C_i >= c0, scores against T~_i ^ c0,
    weighted by an estimate of 1 / P(C >= c0 | x)
  - adaptive-T / adaptive-CT: choose the level a of a monotone family f_a from the
    estimated miscoverage over units with f_a(X_i) <= C_i
  - cox: the uncalibrated q_alpha(x), for comparison
  - random-forest: the uncalibrated alpha-quantile of a censored quantile regression
    forest (IPCW event masses), for comparison
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from src.bound_family import (
    BoundFamily,
    MonotoneBoundFamily,
    check_levels,
    cox_quantile_family,
    truncate_family,
    truncation_level,
)
from src.censoring_forest import (
    BoundWeights,
    CensoringForest,
    ForestHyper,
    WeightFunction,
    cutoff_weight_function,
    default_weight_cap,
    fit_censoring_forest,
    make_weight_function,
)
from src.cox_regressor import CoxModel, fit_cox
from src.errors import DataError, UsageError
from src.event_forest import fit_event_forest
from src.logging_helper import Log
from src.settings_manager import METHODS, RunConfig, config_hash
from src.survival_data import Dataset, SplitSpec, spawn_seeds, split
from src.weighted_quantile import WeightedAtoms, quantile_with_infinite_atom, weighted_quantile

ADAPTIVE_VARIANTS = {"T": "adaptive-T", "CT": "adaptive-CT"}


def _check_alpha(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise UsageError(f"alpha must lie in (0, 1), got {alpha}")
    return float(alpha)


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    """Knots of the estimated miscoverage, its values there, and the selected level."""

    a_hat: float
    knots: np.ndarray
    alpha_trace: np.ndarray
    running_sup: np.ndarray
    method: str
    alpha: float
    eps: float

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"knot": self.knots, "alpha_hat": self.alpha_trace, "running_sup": self.running_sup})

    def to_dict(self) -> Dict[str, Any]:
        return {"a_hat": self.a_hat, "method": self.method, "alpha": self.alpha, "eps": self.eps, "n_knots": int(self.knots.size)}

    @classmethod
    def from_parts(cls, payload: Dict[str, Any], trace: pd.DataFrame) -> "CalibrationResult":
        return cls(
            a_hat=float(payload["a_hat"]),
            knots=trace["knot"].to_numpy(dtype=float),
            alpha_trace=trace["alpha_hat"].to_numpy(dtype=float),
            running_sup=trace["running_sup"].to_numpy(dtype=float),
            method=str(payload["method"]),
            alpha=float(payload["alpha"]),
            eps=float(payload["eps"]),
        )


@dataclass(frozen=True)
class FixedCutoffSpec:
    """Either an explicit cutoff c0 or the q-quantile of the training censoring times."""

    c0: Optional[float] = None
    quantile: float = 0.5

    def __post_init__(self):
        if self.c0 is not None and not self.c0 > 0:
            raise UsageError(f"c0 must be positive, got {self.c0}")
        if not 0.0 < self.quantile < 1.0:
            raise UsageError(f"cutoff quantile must lie in (0, 1), got {self.quantile}")

    def resolve(self, train: Optional[Dataset] = None) -> float:
        if self.c0 is not None:
            return float(self.c0)
        if train is None or train.n == 0:
            raise DataError("the train-quantile cutoff rule needs a nonempty training fold")
        c0 = weighted_quantile(WeightedAtoms(train.ctime, np.ones(train.n)), self.quantile)
        if not c0 > 0:
            raise DataError(f"resolved cutoff c0={c0} is not positive")
        return c0


@dataclass(frozen=True, eq=False)
class LpbModel:
    """
    A calibrated lower predictive bound.

    The raw bound is family(x, level) minus a correction: a scalar for the
    baseline and cox methods, a query-dependent weighted quantile for the fixed
    cutoff method, and zero for the adaptive methods (whose level is a_hat).
    """

    method: str
    alpha: float
    level: float
    family: MonotoneBoundFamily
    correction: float = 0.0
    cox: Optional[CoxModel] = None
    forest: Optional[CensoringForest] = None
    c0: Optional[float] = None
    cutoff_scores: Optional[np.ndarray] = None
    cutoff_weights: Optional[np.ndarray] = None
    query_weights: Optional[WeightFunction] = None
    weight_cap: Optional[float] = None
    truncation_beta: Optional[float] = None
    calibration: Optional[CalibrationResult] = None
    provenance: Dict[str, Any] = field(default_factory=dict)

    def corrections(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.method != "fixed":
            return np.full(X.shape[0], self.correction)
        tail = self.query_weights.bind(X)(self.alpha) if X.shape[0] else np.zeros(0)
        return quantile_with_infinite_atom(self.cutoff_scores, self.cutoff_weights, tail, 1.0 - self.alpha)

    def predict_raw(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] == 0:
            return np.zeros(0)
        with np.errstate(invalid="ignore"):
            return self.family(X, self.level) - self.corrections(X)

    def predict(self, X) -> np.ndarray:
        """Bounds clamped at zero; -inf and undefined raw values become 0."""
        raw = self.predict_raw(X)
        return np.where(raw > 0, raw, 0.0)

    def vacuous(self, X) -> np.ndarray:
        return ~(self.predict_raw(X) > 0)


# ---------------------------------------------------------------------------
# Baseline and fixed cutoff
# ---------------------------------------------------------------------------

def baseline_lpb(family: MonotoneBoundFamily, cal: Dataset, alpha: float) -> LpbModel:
    """L(x) = max(0, q_alpha(x) - Q_{1-alpha}(scores and a +inf atom, equal weights))."""
    alpha = _check_alpha(alpha)
    cal.require_nonempty("calibration fold")
    scores = family(cal.X, alpha) - cal.otime
    correction = float(quantile_with_infinite_atom(scores, np.ones(cal.n), np.ones(1), 1.0 - alpha)[0])
    Log.kv({"stage": "baseline", "result": "success", "n_cal": cal.n, "correction": f"{correction:.6g}"})
    return LpbModel(method="baseline", alpha=alpha, level=alpha, family=family, correction=correction)


def fixed_cutoff_lpb(
    family: MonotoneBoundFamily,
    cal: Dataset,
    alpha: float,
    spec: FixedCutoffSpec,
    weights: WeightFunction,
    train: Optional[Dataset] = None,
) -> LpbModel:
    """
    Weighted split conformal on I2' = {i : C_i >= c0}. The +inf atom carries the
    query's own weight, so the correction varies with x.
    """
    alpha = _check_alpha(alpha)
    c0 = spec.resolve(train)
    keep = np.flatnonzero(cal.ctime >= c0)
    if keep.size == 0:
        Log.kv({"stage": "fixed_cutoff", "result": "failed", "c0": c0})
        raise DataError(f"no calibration unit has ctime >= c0={c0:.6g}; lower the cutoff")
    filtered = cal.subset(keep)
    scores = family(filtered.X, alpha) - np.minimum(filtered.otime, c0)
    unit_weights = weights.bind(filtered.X)(alpha)
    Log.kv({"stage": "fixed_cutoff", "result": "success", "c0": f"{c0:.6g}", "n_cal": cal.n, "n_kept": keep.size})
    return LpbModel(
        method="fixed",
        alpha=alpha,
        level=alpha,
        family=family,
        correction=0.0,
        c0=c0,
        cutoff_scores=scores,
        cutoff_weights=unit_weights,
        query_weights=weights,
        weight_cap=weights.cap,
    )


# ---------------------------------------------------------------------------
# Adaptive cutoff calibration
# ---------------------------------------------------------------------------

class AlphaEstimator:
    """alpha_hat(a) over a fixed calibration fold, with family and weights bound once."""

    def __init__(self, family: MonotoneBoundFamily, weights: WeightFunction, cal: Dataset):
        self.bound = family.bind(cal.X)
        self.weights = weights.bind(cal.X)
        self.otime = cal.otime
        self.ctime = cal.ctime

    def parts(self, a) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-row numerator and denominator terms and eligibility at a (scalar or one level per row)."""
        f = self.bound(a)
        w = self.weights(a)
        eligible = f <= self.ctime
        missed = eligible & (self.otime < f)
        return np.where(missed, w, 0.0), np.where(eligible, w, 0.0), eligible

    def __call__(self, a: float) -> float:
        numerator, denominator, eligible = self.parts(a)
        if not eligible.any():
            return 1.0
        total = denominator.sum()
        if not total > 0:
            return 1.0
        return float(numerator.sum() / total)


def estimate_alpha(a: float, family: MonotoneBoundFamily, weights: WeightFunction, cal: Dataset) -> float:
    """
    alpha_hat(a) = sum w_a(X_i) 1{T~_i < f_a(X_i) <= C_i} / sum w_a(X_i) 1{f_a(X_i) <= C_i},
    and 1 when no unit has f_a(X_i) <= C_i.
    """
    check_levels(a)
    return AlphaEstimator(family, weights, cal)(float(a))


def _check_eps(eps: float) -> int:
    if not eps > 0:
        raise UsageError(f"eps must be positive, got {eps}")
    return max(20, math.ceil(math.log2(1.0 / eps)))


def _level_suprema(bound: BoundFamily, targets: np.ndarray, n_iter: int) -> np.ndarray:
    """
    sup{a : f_a(x_i) <= targets[i, j]} for every entry, by bisection on [0, 1],
    reported from below where the inequality still holds. NaN targets stay NaN.
    """
    suprema = np.full(targets.shape, np.nan)
    top = bound(1.0)
    for j in range(targets.shape[1]):
        column = targets[:, j]
        present = ~np.isnan(column)
        if not present.any():
            continue
        lo = np.zeros(column.size)
        hi = np.ones(column.size)
        for _ in range(n_iter):
            mid = 0.5 * (lo + hi)
            ok = bound(mid) <= column
            lo = np.where(ok, mid, lo)
            hi = np.where(ok, hi, mid)
        lo[top <= column] = 1.0
        suprema[present, j] = lo[present]
    return suprema


def _knot_targets(cal: Dataset, bound: BoundFamily, weights: Optional[BoundWeights]) -> np.ndarray:
    """
    Per-row values whose crossing by f_a(X_i) can move alpha_hat: T~_i and C_i,
    then the points where the row's weight steps (NaN padded).
    """
    columns = np.column_stack([cal.otime, cal.ctime])
    if weights is None:
        return columns
    rows, points = weights.steps(cal.ctime)
    # a step the bound never passes within [0, 1] cannot move the weight
    reachable = points < bound(1.0)[rows]
    rows, points = rows[reachable], points[reachable]
    if rows.size == 0:
        return columns
    counts = np.bincount(rows, minlength=cal.n)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    order = np.argsort(rows, kind="stable")
    rows, points = rows[order], points[order]
    padded = np.full((cal.n, int(counts.max())), np.nan)
    padded[rows, np.arange(rows.size) - starts[rows]] = points
    return np.hstack([columns, padded])


def _knots_from_suprema(suprema: np.ndarray) -> np.ndarray:
    return np.unique(np.concatenate([[0.0], suprema[~np.isnan(suprema)]]))


def find_knots(
    family: MonotoneBoundFamily,
    cal: Dataset,
    eps: float = 1e-4,
    weights: Optional[WeightFunction] = None,
) -> np.ndarray:
    """
    Levels where alpha_hat can change: sup{a : f_a(X_i) <= T~_i} and
    sup{a : f_a(X_i) <= C_i} for every unit, plus 0. Each sup is bracketed by
    bisection and reported from below, where the inequality still holds.

    With weights, the levels where f_a(X_i) passes a step of the unit's weight
    are added, so alpha_hat is constant between consecutive knots.
    """
    n_iter = _check_eps(eps)
    bound = family.bind(cal.X)
    bound_weights = weights.bind(cal.X) if weights is not None else None
    knots = _knots_from_suprema(_level_suprema(bound, _knot_targets(cal, bound, bound_weights), n_iter))
    Log.kv({"stage": "knots", "result": "success", "n_cal": cal.n, "knots": knots.size, "iterations": n_iter})
    return knots


def _swept_trace(estimator: AlphaEstimator, suprema: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """
    alpha_hat at every knot without re-evaluating every unit at every knot.

    Each unit's terms are constant on the intervals between its own suprema,
    so they are evaluated once per interval (at its right end) and the fold
    totals are accumulated as the knots pass each unit's change points.
    """
    n = suprema.shape[0]
    own = np.hstack([np.zeros((n, 1)), np.where(np.isnan(suprema), 1.0, suprema), np.ones((n, 1))])
    own.sort(axis=1)
    numerator = np.empty(own.shape)
    denominator = np.empty(own.shape)
    eligible = np.empty(own.shape)
    for j in range(own.shape[1]):
        numerator[:, j], denominator[:, j], eligible[:, j] = estimator.parts(own[:, j])

    positions = own[:, :-1].ravel()
    order = np.argsort(positions, kind="stable")
    positions = positions[order]

    def totals(terms: np.ndarray) -> np.ndarray:
        steps = np.diff(terms, axis=1).ravel()[order]
        running = np.concatenate([[0.0], np.cumsum(steps)])
        return terms[:, 0].sum() + running[np.searchsorted(positions, knots, side="left")]

    numerators = totals(numerator)
    denominators = totals(denominator)
    counts = totals(eligible)
    with np.errstate(divide="ignore", invalid="ignore"):
        trace = np.where((counts > 0.5) & (denominators > 0), numerators / denominators, 1.0)
    return np.clip(trace, 0.0, 1.0)


def select_level(knots: np.ndarray, alpha_trace: np.ndarray, alpha: float) -> Tuple[float, np.ndarray]:
    """Largest knot whose running maximum of alpha_hat stays <= alpha (0 if none)."""
    running = np.maximum.accumulate(np.asarray(alpha_trace, dtype=float))
    accepted = np.flatnonzero(running <= alpha)
    a_hat = float(knots[accepted[-1]]) if accepted.size else 0.0
    return a_hat, running


def calibrate_adaptive(
    family: MonotoneBoundFamily,
    weights: WeightFunction,
    cal: Dataset,
    alpha: float,
    eps: float = 1e-4,
    method: str = "adaptive",
) -> CalibrationResult:
    """
    Evaluate alpha_hat at every knot (indicator knots and weight steps) and keep
    the largest knot whose running supremum stays at or below alpha.
    """
    alpha = _check_alpha(alpha)
    cal.require_nonempty("calibration fold")
    n_iter = _check_eps(eps)
    estimator = AlphaEstimator(family, weights, cal)
    suprema = _level_suprema(estimator.bound, _knot_targets(cal, estimator.bound, estimator.weights), n_iter)
    knots = _knots_from_suprema(suprema)
    Log.kv({"stage": "knots", "result": "success", "n_cal": cal.n, "knots": knots.size, "iterations": n_iter})
    trace = _swept_trace(estimator, suprema, knots)
    a_hat, running = select_level(knots, trace, alpha)
    Log.kv({"stage": "calibrate", "result": "success", "method": method, "knots": knots.size, "a_hat": f"{a_hat:.6f}"})
    return CalibrationResult(
        a_hat=a_hat,
        knots=knots,
        alpha_trace=trace,
        running_sup=running,
        method=method,
        alpha=alpha,
        eps=eps,
    )


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------

@dataclass
class LpbComponents:
    """Models fitted on the training fold, shared across methods."""

    cox: CoxModel
    forest: Optional[CensoringForest] = None
    cox_seconds: float = 0.0
    forest_seconds: float = 0.0
    forest_seed: int = 0


def component_seeds(seed: int) -> Tuple[int, int]:
    """(split seed, forest seed) derived from a master seed."""
    split_seed, forest_seed = spawn_seeds(seed, 2)
    return split_seed, forest_seed


def forest_hyper(config: RunConfig) -> ForestHyper:
    return ForestHyper(
        n_trees=config.n_trees,
        min_leaf=config.min_leaf,
        max_depth=config.max_depth,
        mtry=config.mtry,
        n_jobs=config.forest_jobs,
    )


def needs_forest(method: str) -> bool:
    return method in ("fixed", "adaptive-T", "adaptive-CT", "random-forest")


def fit_components(train: Dataset, config: RunConfig, with_forest: bool, forest_seed: int) -> LpbComponents:
    started = time.perf_counter()
    cox = fit_cox(train, max_iter=config.cox_max_iter, tol=config.cox_tol)
    cox_seconds = time.perf_counter() - started
    forest = None
    forest_seconds = 0.0
    if with_forest:
        started = time.perf_counter()
        forest = fit_censoring_forest(train, forest_hyper(config), seed=forest_seed)
        forest_seconds = time.perf_counter() - started
    return LpbComponents(cox=cox, forest=forest, cox_seconds=cox_seconds, forest_seconds=forest_seconds, forest_seed=forest_seed)


def build_lpb(
    method: str,
    components: LpbComponents,
    train: Dataset,
    cal: Dataset,
    config: RunConfig,
) -> LpbModel:
    """Calibrate one method from already fitted components."""
    if method not in METHODS:
        raise UsageError(f"unknown method '{method}'; expected one of {', '.join(METHODS)}")
    alpha = _check_alpha(config.alpha)
    cal.require_nonempty("calibration fold")
    if needs_forest(method) and components.forest is None:
        raise UsageError(f"method '{method}' needs a fitted censoring forest")
    family = cox_quantile_family(components.cox)
    provenance: Dict[str, Any] = {
        "n_train": train.n,
        "n_cal": cal.n,
        "p": train.p,
        "cox_converged": components.cox.converged,
        "forest_seed": components.forest_seed if components.forest is not None else None,
    }

    if method == "cox":
        model = LpbModel(method="cox", alpha=alpha, level=alpha, family=family, correction=0.0)
    elif method == "random-forest":
        family = fit_event_forest(train, components.forest, forest_hyper(config), seed=components.forest_seed)
        model = LpbModel(method=method, alpha=alpha, level=alpha, family=family, correction=0.0)
    elif method == "baseline":
        model = baseline_lpb(family, cal, alpha)
    elif method == "fixed":
        spec = FixedCutoffSpec(c0=config.c0, quantile=config.cutoff_quantile)
        c0 = spec.resolve(train)
        cap = config.fixed_weight_cap if config.fixed_weight_cap is not None else float(max(1, cal.n))
        weights = cutoff_weight_function(components.forest, c0, cap)
        model = fixed_cutoff_lpb(family, cal, alpha, FixedCutoffSpec(c0=c0), weights)
    else:
        beta = None
        if method == "adaptive-CT":
            beta = config.truncation_beta if config.truncation_beta is not None else truncation_level(cal.n)
            family = truncate_family(family, components.forest, beta)
        cap = config.weight_cap if config.weight_cap is not None else default_weight_cap(cal.n)
        weights = make_weight_function(components.forest, family, cap)
        calibration = calibrate_adaptive(family, weights, cal, alpha, config.eps, method=method)
        model = LpbModel(
            method=method,
            alpha=alpha,
            level=calibration.a_hat,
            family=family,
            correction=0.0,
            weight_cap=cap,
            truncation_beta=beta,
            calibration=calibration,
        )

    return replace(
        model,
        cox=components.cox,
        forest=components.forest if needs_forest(method) else None,
        provenance={**provenance, **model.provenance},
    )


def adaptive_lpb(
    train: Dataset,
    cal: Dataset,
    alpha: float,
    variant: str = "CT",
    config: Optional[RunConfig] = None,
) -> LpbModel:
    """Fit the Cox family and censoring forest on train, calibrate the level on cal."""
    if variant not in ADAPTIVE_VARIANTS:
        raise UsageError(f"unknown adaptive variant '{variant}'; expected T or CT")
    train.require_nonempty("training fold")
    cal.require_nonempty("calibration fold")
    config = (config or RunConfig()).model_copy(update={"alpha": _check_alpha(alpha)})
    _, forest_seed = component_seeds(config.seed)
    components = fit_components(train, config, with_forest=True, forest_seed=forest_seed)
    return build_lpb(ADAPTIVE_VARIANTS[variant], components, train, cal, config)


def train_lpb(data: Dataset, config: RunConfig) -> Tuple[LpbModel, Dataset, Dataset]:
    """Split, fit and calibrate the configured method. Returns the model and both folds."""
    Log.section(f"Train {config.method}")
    split_seed, forest_seed = component_seeds(config.seed)
    train, cal = split(data, SplitSpec(train_fraction=config.train_fraction, seed=split_seed))
    components = fit_components(train, config, with_forest=needs_forest(config.method), forest_seed=forest_seed)
    model = build_lpb(config.method, components, train, cal, config)
    provenance = {
        **model.provenance,
        "seed": config.seed,
        "split_seed": split_seed,
        "config_sha256": config_hash(config),
    }
    return replace(model, provenance=provenance), train, cal
