"""
Scoring LPB models and the Monte-Carlo benchmark harness.

Coverage and average LPB need the latent survival time; beta_lo / beta_hi
bracket the coverage from censored data alone:

    beta_lo = mean 1{otime >= L(x)}
    beta_hi = 1 - mean 1{otime < L(x), otime < ctime}
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src import __version__
from src.conformal_lpb import (
    LpbModel,
    build_lpb,
    component_seeds,
    fit_components,
    needs_forest,
)
from src.errors import DataError, LpbError, UsageError
from src.logging_helper import Log
from src.settings_manager import METHODS, RunConfig, config_hash
from src.simulate import generate, get_setting
from src.survival_data import Dataset, SplitSpec, spawn_seeds, split, write_frame

DEFAULT_SIZES = (1000, 1000, 5000)
SUMMARY_QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)
TRIAL_FAILURES = (LpbError, ArithmeticError, ValueError, np.linalg.LinAlgError)


def _bounds(model, test: Dataset) -> np.ndarray:
    return np.asarray(model.predict(test.X), dtype=float)


def coverage_from_bounds(bounds: np.ndarray, test: Dataset) -> float:
    if test.true_time is None:
        raise DataError("coverage needs a true_time column; use coverage_bounds for censored data")
    test.require_nonempty("test set")
    return float(np.mean(bounds < test.true_time))


def coverage_bounds_from_bounds(bounds: np.ndarray, test: Dataset) -> Tuple[float, float]:
    test.require_nonempty("test set")
    beta_lo = float(np.mean(test.otime >= bounds))
    beta_hi = float(1.0 - np.mean((test.otime < bounds) & test.events))
    return beta_lo, beta_hi


def coverage(model: LpbModel, test: Dataset) -> float:
    """Fraction of test units with L(x) < T (strict)."""
    return coverage_from_bounds(_bounds(model, test), test)


def average_lpb(model: LpbModel, test: Dataset) -> float:
    test.require_nonempty("test set")
    return float(np.mean(_bounds(model, test)))


def coverage_bounds(model: LpbModel, test: Dataset) -> Tuple[float, float]:
    """(beta_lo, beta_hi) from otime and ctime only."""
    return coverage_bounds_from_bounds(_bounds(model, test), test)


def evaluate_bounds(bounds: np.ndarray, test: Dataset) -> Dict[str, Any]:
    beta_lo, beta_hi = coverage_bounds_from_bounds(bounds, test)
    return {
        "n": test.n,
        "coverage": coverage_from_bounds(bounds, test) if test.has_true_time else None,
        "avg_lpb": float(np.mean(bounds)),
        "beta_lo": beta_lo,
        "beta_hi": beta_hi,
        "vacuous_fraction": float(np.mean(bounds <= 0)),
    }


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

@dataclass
class TrialReport:
    trial: int
    seed: int
    method: str
    status: str = "ok"
    coverage: Optional[float] = None
    avg_lpb: Optional[float] = None
    beta_lo: Optional[float] = None
    beta_hi: Optional[float] = None
    a_hat: Optional[float] = None
    cox_converged: Optional[bool] = None
    wall_time: float = 0.0
    error: str = ""


@dataclass
class BenchmarkSummary:
    setting: int
    alpha: float
    sizes: Tuple[int, int, int]
    seed: int
    methods: List[str]
    trial_seeds: List[int]
    reports: List[TrialReport]
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_trials(self) -> int:
        return len(self.trial_seeds)

    def trials_frame(self) -> pd.DataFrame:
        """One row per trial x method, without timing; deterministic given the seed."""
        frame = pd.DataFrame([asdict(r) for r in self.reports])
        return frame.drop(columns=["wall_time"])

    def timing_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"trial": r.trial, "method": r.method, "status": r.status, "wall_time": r.wall_time} for r in self.reports])

    def method_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for method in self.methods:
            reports = [r for r in self.reports if r.method == method]
            ok = [r for r in reports if r.status == "ok"]
            row: Dict[str, Any] = {"method": method, "effective_n": len(ok), "failed": len(reports) - len(ok)}
            for metric in ("coverage", "avg_lpb", "beta_lo", "beta_hi", "wall_time"):
                values = np.array([getattr(r, metric) for r in ok if getattr(r, metric) is not None], dtype=float)
                row[f"{metric}_mean"] = float(values.mean()) if values.size else None
                row[f"{metric}_sd"] = float(values.std(ddof=1 if values.size >= 2 else 0)) if values.size else None
                if metric in ("coverage", "avg_lpb"):
                    for q in SUMMARY_QUANTILES:
                        row[f"{metric}_q{int(q * 100):02d}"] = float(np.quantile(values, q)) if values.size else None
            rows.append(row)
        return rows

    def method_stats(self) -> pd.DataFrame:
        return pd.DataFrame(self.method_rows())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": __version__,
            "setting": self.setting,
            "alpha": self.alpha,
            "sizes": list(self.sizes),
            "seed": self.seed,
            "n_trials": self.n_trials,
            "trial_seeds": self.trial_seeds,
            "config": self.config,
            "methods": self.method_rows(),
        }


def _failed(trial: int, seed: int, method: str, err: BaseException, converged: Optional[bool] = None) -> TrialReport:
    Log.error(f"trial {trial} method {method} failed: {err}")
    return TrialReport(trial=trial, seed=seed, method=method, status="failed", cox_converged=converged, error=str(err))


def run_trial(
    setting: int,
    methods: Sequence[str],
    sizes: Tuple[int, int, int],
    config: RunConfig,
    trial: int,
    trial_seed: int,
) -> List[TrialReport]:
    """Generate, split, fit once, then calibrate and score every method."""
    n_train, n_cal, n_test = sizes
    data_seed, test_seed, model_seed = spawn_seeds(trial_seed, 3)
    split_seed, forest_seed = component_seeds(model_seed)
    try:
        data = generate(setting, n_train + n_cal, data_seed)
        test = generate(setting, n_test, test_seed)
        # midpoint keeps floor(n * fraction) at n_train exactly
        fraction = (n_train + 0.5) / (n_train + n_cal)
        train, cal = split(data, SplitSpec(train_fraction=fraction, seed=split_seed))
        components = fit_components(
            train,
            config,
            with_forest=any(needs_forest(m) for m in methods),
            forest_seed=forest_seed,
        )
    except TRIAL_FAILURES as err:
        return [_failed(trial, trial_seed, method, err) for method in methods]

    converged = bool(components.cox.converged)
    reports = []
    for method in methods:
        started = time.perf_counter()
        try:
            model = build_lpb(method, components, train, cal, config)
            bounds = model.predict(test.X)
        except TRIAL_FAILURES as err:
            reports.append(_failed(trial, trial_seed, method, err, converged))
            continue
        elapsed = time.perf_counter() - started + components.cox_seconds
        if needs_forest(method):
            elapsed += components.forest_seconds
        scores = evaluate_bounds(bounds, test)
        reports.append(TrialReport(
            trial=trial,
            seed=trial_seed,
            method=method,
            coverage=scores["coverage"],
            avg_lpb=scores["avg_lpb"],
            beta_lo=scores["beta_lo"],
            beta_hi=scores["beta_hi"],
            a_hat=model.calibration.a_hat if model.calibration is not None else None,
            cox_converged=converged,
            wall_time=elapsed,
        ))
    return reports


def check_methods(methods: Sequence[str]) -> List[str]:
    methods = list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise UsageError(f"unknown methods {unknown}; expected a nonempty subset of {', '.join(METHODS)}")
    return methods


def run_benchmark(
    setting: int,
    methods: Sequence[str] = ("baseline", "fixed", "adaptive-T", "adaptive-CT", "random-forest"),
    n_trials: int = 100,
    sizes: Tuple[int, int, int] = DEFAULT_SIZES,
    alpha: float = 0.1,
    seed: int = 0,
    config: Optional[RunConfig] = None,
    workers: Optional[int] = None,
) -> BenchmarkSummary:
    spec = get_setting(setting)
    methods = check_methods(methods)
    if n_trials < 1:
        raise UsageError(f"n_trials must be >= 1, got {n_trials}")
    if len(sizes) != 3 or min(sizes) < 1 or sizes[1] < 2:
        raise UsageError(f"sizes must be (n_train, n_cal >= 2, n_test), got {sizes}")
    config = RunConfig(**{**(config or RunConfig()).model_dump(), "alpha": alpha, "seed": seed})
    n_jobs = workers or config.resolved_workers()

    Log.section(f"Benchmark setting {spec.id}")
    trial_seeds = spawn_seeds(seed, n_trials)
    started = time.perf_counter()
    per_trial = Parallel(n_jobs=n_jobs)(
        delayed(run_trial)(spec.id, methods, tuple(sizes), config, trial, trial_seed)
        for trial, trial_seed in enumerate(trial_seeds)
    )
    reports = [report for trial_reports in per_trial for report in trial_reports]
    summary = BenchmarkSummary(
        setting=spec.id,
        alpha=alpha,
        sizes=tuple(sizes),
        seed=seed,
        methods=methods,
        trial_seeds=trial_seeds,
        reports=reports,
        config=config.model_dump(mode="json"),
    )
    failed = sum(r.status == "failed" for r in reports)
    Log.kv({
        "stage": "benchmark",
        "result": "success" if failed == 0 else "partial",
        "setting": spec.id,
        "trials": n_trials,
        "failed": failed,
        "workers": n_jobs,
        "seconds": f"{time.perf_counter() - started:.1f}",
    })
    return summary


def write_benchmark(summary: BenchmarkSummary, prefix, config: RunConfig) -> Dict[str, Path]:
    """Write <prefix>_trials.csv, <prefix>_timing.csv and <prefix>_summary.json."""
    prefix = Path(prefix)
    header = [
        f"conformal-survival {__version__}",
        f"config_sha256={config_hash(config)}",
        f"setting={summary.setting} seed={summary.seed} trials={summary.n_trials}",
    ]
    paths = {
        "trials": prefix.with_name(prefix.name + "_trials.csv"),
        "timing": prefix.with_name(prefix.name + "_timing.csv"),
        "summary": prefix.with_name(prefix.name + "_summary.json"),
    }
    write_frame(summary.trials_frame(), paths["trials"], header)
    write_frame(summary.timing_frame(), paths["timing"], header)
    paths["summary"].write_text(json.dumps(summary.to_dict(), indent=2) + "\n", encoding="utf-8")
    Log.kv({"stage": "benchmark_write", "result": "success", "prefix": str(prefix)})
    return paths
