"""
Run configuration for training, calibration and benchmarks.

Every field has a default. A JSON config file may set any subset of the
fields; known keys are merged over the defaults, unknown keys are reported and
ignored. Command-line flags are applied on top with `apply_overrides`.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from src.errors import DataError
from src.logging_helper import Log

Method = Literal["baseline", "fixed", "adaptive-T", "adaptive-CT", "cox", "random-forest"]
METHODS = ("baseline", "fixed", "adaptive-T", "adaptive-CT", "cox", "random-forest")


class RunConfig(BaseModel):
    """None on an optional field means the data-dependent default noted beside it."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    alpha: float = Field(0.1, gt=0.0, lt=1.0)
    method: Method = "adaptive-CT"
    train_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    seed: int = Field(0, ge=0)
    eps: float = Field(1e-4, gt=0.0, lt=1.0)

    cox_max_iter: int = Field(50, ge=1)
    cox_tol: float = Field(1e-8, gt=0.0)

    n_trees: int = Field(200, ge=1)
    min_leaf: int = Field(10, ge=1)
    max_depth: Optional[int] = Field(None, ge=0)  # unbounded
    mtry: Optional[int] = Field(None, ge=1)  # ceil(p/3)
    forest_jobs: Optional[int] = None  # scikit-learn default (1)

    weight_cap: Optional[float] = Field(None, ge=1.0)  # max(1, log n_cal)
    fixed_weight_cap: Optional[float] = Field(None, ge=1.0)  # n_cal
    c0: Optional[float] = Field(None, gt=0.0)  # training ctime quantile
    cutoff_quantile: float = Field(0.5, gt=0.0, lt=1.0)
    truncation_beta: Optional[float] = Field(None, gt=0.0, lt=1.0)  # min(0.5, 1/log n_cal)

    workers: Optional[int] = Field(None, ge=1)  # available CPUs
    input_path: Optional[str] = None
    output_path: Optional[str] = None

    def resolved_workers(self) -> int:
        return self.workers or os.cpu_count() or 1


DEFAULT_CONFIG = RunConfig()


def load_config(path: Optional[str | Path] = None) -> RunConfig:
    """
    Load a config file, merging known keys over the defaults.
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError("config data is not a JSON object")
    except (OSError, ValueError) as err:
        raise DataError(f"failed to read config file ({path}): {err}")

    known = set(RunConfig.model_fields)
    unknown = sorted(set(data) - known)
    if unknown:
        Log.warn(f"Ignoring unknown config keys in {path}: {', '.join(unknown)}")
    # Merge only known keys
    merged = {key: value for key, value in data.items() if key in known}
    config = RunConfig(**merged)
    Log.kv({"stage": "config", "result": "success", "path": str(path), "keys": len(merged)})
    return config


def save_config(config: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def apply_overrides(config: RunConfig, **flags: Any) -> RunConfig:
    """Flags set to None keep the file (or default) value."""
    updates: Dict[str, Any] = {key: value for key, value in flags.items() if value is not None}
    if not updates:
        return config
    return RunConfig(**{**config.model_dump(), **updates})


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
