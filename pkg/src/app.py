"""
Command-line entry point: conformal-survival <subcommand> [flags].

    simulate   draw a synthetic dataset for one benchmark setting
    train      split, fit and calibrate an LPB; writes a model bundle
    predict    LPBs for the covariate rows of a CSV
    evaluate   coverage / average LPB / beta_lo, beta_hi of a model on a dataset
    benchmark  Monte-Carlo comparison of methods on the synthetic settings

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import faulthandler
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError
from pydantic_settings import BaseSettings, CliApp, CliSubCommand, SettingsConfigDict, SettingsError

from src import __version__
from src.conformal_lpb import train_lpb
from src.errors import DataError, LpbError, NumericalError, UsageError
from src.evaluate import DEFAULT_SIZES, check_methods, evaluate_bounds, run_benchmark, write_benchmark
from src.logging_helper import QUIET_ENV, Log
from src.model_store import load_bundle, save_bundle
from src.settings_manager import RunConfig, apply_overrides, config_hash, load_config, save_config
from src.simulate import SETTINGS, generate
from src.survival_data import read_covariates, read_dataset, write_dataset, write_frame

faulthandler.enable()

PROG = "conformal-survival"


def provenance_lines(config: Optional[RunConfig] = None, **extra) -> List[str]:
    """Comment lines written at the top of every output CSV."""
    lines = [f"{PROG} {__version__}"]
    if config is not None:
        lines.append(f"config_sha256={config_hash(config)}")
    if extra:
        lines.append(" ".join(f"{key}={value}" for key, value in extra.items()))
    return lines


def _parse_ints(text: str, what: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of integers, got '{text}'")


def _run_config(config_path: Optional[str], **flags) -> RunConfig:
    try:
        return apply_overrides(load_config(config_path), **flags)
    except ValidationError as err:
        raise UsageError(f"invalid configuration: {err}")


class SimulateCommand(BaseModel):
    """Draw a synthetic dataset (with true_time) for one setting."""

    setting: int = Field(description="setting id, 1-6")
    rows: int = Field(description="number of records")
    seed: int = Field(0, description="master seed")
    out: str = Field(description="output CSV path")

    def cli_cmd(self) -> None:
        Log.section("Simulate")
        data = generate(self.setting, self.rows, self.seed)
        write_dataset(data, self.out, provenance_lines(setting=self.setting, rows=self.rows, seed=self.seed))
        Log.info(f"Wrote {data.n} records to {self.out}")


class TrainCommand(BaseModel):
    """Fit on the training fold, calibrate on the calibration fold, write a model bundle."""

    data: str = Field(description="dataset CSV (x1..xp, ctime, otime)")
    out: str = Field(description="output model bundle directory")
    config: Optional[str] = Field(None, description="JSON run config; flags override it")
    method: Optional[str] = Field(None, description="baseline | fixed | adaptive-T | adaptive-CT | cox | random-forest")
    alpha: Optional[float] = Field(None, description="target miscoverage level")
    seed: Optional[int] = Field(None, description="master seed")
    eps: Optional[float] = Field(None, description="knot bisection tolerance")
    fraction: Optional[float] = Field(None, description="training fraction of the split")

    def cli_cmd(self) -> None:
        config = _run_config(
            self.config,
            method=self.method,
            alpha=self.alpha,
            seed=self.seed,
            eps=self.eps,
            train_fraction=self.fraction,
            input_path=self.data,
            output_path=self.out,
        )
        data = read_dataset(self.data)
        model, train, cal = train_lpb(data, config)
        header = provenance_lines(config, seed=config.seed, method=config.method)
        save_bundle(model, self.out, header)
        save_config(config, Path(self.out) / "config.json")
        Log.kv({
            "stage": "train",
            "result": "success",
            "method": model.method,
            "level": f"{model.level:.6f}",
            "n_train": train.n,
            "n_cal": cal.n,
            "out": self.out,
        })


class PredictCommand(BaseModel):
    """Write one clamped LPB per covariate row, with a vacuous flag."""

    bundle: str = Field(description="model bundle directory")
    covariates: str = Field(description="CSV with columns x1..xp")
    out: str = Field(description="output CSV path")

    def cli_cmd(self) -> None:
        model = load_bundle(self.bundle)
        X = read_covariates(self.covariates, p=model.cox.p)
        bounds = model.predict(X)
        frame = pd.DataFrame({"lpb": bounds, "vacuous": model.vacuous(X).astype(int)})
        write_frame(frame, self.out, provenance_lines(
            method=model.method,
            config_sha256=model.provenance.get("config_sha256", "-"),
        ))
        Log.kv({"stage": "predict", "result": "success", "rows": len(frame), "vacuous": int(frame["vacuous"].sum())})


class EvaluateCommand(BaseModel):
    """Coverage (if true_time is present), average LPB and beta_lo / beta_hi on a dataset."""

    bundle: str = Field(description="model bundle directory")
    data: str = Field(description="dataset CSV")
    out: Optional[str] = Field(None, description="optional JSON output path")

    def cli_cmd(self) -> None:
        model = load_bundle(self.bundle)
        data = read_dataset(self.data)
        if data.p != model.cox.p:
            raise DataError(f"dimension mismatch: model expects {model.cox.p} covariates, {self.data} has {data.p}")
        scores = evaluate_bounds(model.predict(data.X), data)
        Log.kv({"stage": "evaluate", "result": "success", "method": model.method, **scores})
        if self.out:
            Path(self.out).parent.mkdir(parents=True, exist_ok=True)
            Path(self.out).write_text(json.dumps({"method": model.method, **scores}, indent=2) + "\n", encoding="utf-8")


class BenchmarkCommand(BaseModel):
    """Run N trials per setting and write <prefix>_trials.csv, _timing.csv, _summary.json."""

    setting: str = Field("1", description="setting id or 'all'")
    trials: int = Field(100, description="number of trials")
    methods: str = Field("baseline,fixed,adaptive-T,adaptive-CT,random-forest", description="comma-separated methods")
    sizes: str = Field(",".join(str(s) for s in DEFAULT_SIZES), description="n_train,n_cal,n_test")
    alpha: Optional[float] = Field(None, description="target miscoverage level")
    seed: Optional[int] = Field(None, description="master seed")
    workers: Optional[int] = Field(None, description="parallel trials, default all CPUs")
    config: Optional[str] = Field(None, description="JSON run config")
    prefix: str = Field(description="output path prefix")

    def cli_cmd(self) -> None:
        config = _run_config(self.config, alpha=self.alpha, seed=self.seed, workers=self.workers)
        methods = check_methods([m.strip() for m in self.methods.split(",") if m.strip()])
        sizes = _parse_ints(self.sizes, "sizes")
        if len(sizes) != 3:
            raise UsageError(f"sizes needs three integers n_train,n_cal,n_test, got '{self.sizes}'")
        if self.setting == "all":
            settings = sorted(SETTINGS)
        else:
            settings = _parse_ints(self.setting, "setting")
        for setting in settings:
            summary = run_benchmark(
                setting,
                methods=methods,
                n_trials=self.trials,
                sizes=tuple(sizes),
                alpha=config.alpha,
                seed=config.seed,
                config=config,
                workers=config.workers,
            )
            prefix = self.prefix if len(settings) == 1 else f"{self.prefix}_setting{setting}"
            write_benchmark(summary, prefix, config)


class ConformalSurvivalCLI(BaseSettings):
    """Lower predictive bounds for survival times under Type I censoring."""

    model_config = SettingsConfigDict(
        cli_prog_name=PROG,
        cli_exit_on_error=False,
        env_prefix="CONFORMAL_SURVIVAL_",
    )

    simulate: CliSubCommand[SimulateCommand]
    train: CliSubCommand[TrainCommand]
    predict: CliSubCommand[PredictCommand]
    evaluate: CliSubCommand[EvaluateCommand]
    benchmark: CliSubCommand[BenchmarkCommand]

    def cli_cmd(self) -> None:
        CliApp.run_subcommand(self)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    Log.set_quiet(os.getenv(QUIET_ENV, "").lower() in ("1", "true", "yes"))
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        CliApp.run(ConformalSurvivalCLI, cli_args=args)
    except LpbError as err:
        Log.error(str(err))
        return err.exit_code
    except (ValidationError, SettingsError) as err:
        Log.error(f"usage: {err}")
        return UsageError.exit_code
    except ValueError as err:
        # after the pydantic clause, whose ValidationError is also a ValueError
        Log.error(f"data error: {err}")
        return DataError.exit_code
    except (OSError, pd.errors.ParserError) as err:
        Log.error(str(err))
        return DataError.exit_code
    except (ArithmeticError, np.linalg.LinAlgError) as err:
        Log.error(f"numerical failure: {err}")
        return NumericalError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
