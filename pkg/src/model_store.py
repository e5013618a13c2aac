"""
Model bundles: a directory holding everything `predict` needs.

    model.json              method, levels, corrections, cutoff data, provenance
    cox.json                fitted Cox model
    forest.npz              censoring forest arrays (fixed, adaptive and random-forest methods)
    event_forest.npz        event-time forest and IPCW masses (random-forest method)
    calibration_trace.csv   knot, alpha_hat, running_sup (adaptive methods)

Floats are written with their shortest round-trip repr, so a loaded bundle
predicts bit-identically to the model that was saved.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from src import __version__
from src.bound_family import CT_TRUNCATED, cox_quantile_family, truncate_family
from src.censoring_forest import cutoff_weight_function, load_forest, save_forest
from src.conformal_lpb import CalibrationResult, LpbModel
from src.cox_regressor import CoxModel
from src.errors import DataError, UsageError
from src.event_forest import FOREST_QUANTILE, ForestQuantileFamily, load_event_family, save_event_family
from src.logging_helper import Log
from src.survival_data import write_frame

MODEL_FILE = "model.json"
COX_FILE = "cox.json"
FOREST_FILE = "forest.npz"
EVENT_FOREST_FILE = "event_forest.npz"
TRACE_FILE = "calibration_trace.csv"


def _optional_list(values):
    return None if values is None else np.asarray(values, dtype=float).tolist()


def save_bundle(model: LpbModel, directory, header_lines: Sequence[str] = ()) -> Path:
    if model.cox is None:
        raise UsageError("only models fitted by the training pipeline can be saved")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    payload = {
        "version": __version__,
        "method": model.method,
        "alpha": model.alpha,
        "level": model.level,
        "correction": model.correction,
        "family_kind": model.family.kind,
        "c0": model.c0,
        "cutoff_scores": _optional_list(model.cutoff_scores),
        "cutoff_weights": _optional_list(model.cutoff_weights),
        "weight_cap": model.weight_cap,
        "truncation_beta": model.truncation_beta,
        "calibration": model.calibration.to_dict() if model.calibration is not None else None,
        "provenance": model.provenance,
    }
    (directory / MODEL_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (directory / COX_FILE).write_text(json.dumps(model.cox.to_dict(), indent=2) + "\n", encoding="utf-8")
    if model.forest is not None:
        save_forest(model.forest, directory / FOREST_FILE)
    if isinstance(model.family, ForestQuantileFamily):
        save_event_family(model.family, directory / EVENT_FOREST_FILE)
    if model.calibration is not None:
        write_frame(model.calibration.trace_frame(), directory / TRACE_FILE, header_lines)

    Log.kv({"stage": "save_model", "result": "success", "path": str(directory), "method": model.method})
    return directory


def load_bundle(directory) -> LpbModel:
    directory = Path(directory)
    model_path = directory / MODEL_FILE
    if not model_path.exists():
        raise DataError(f"no model bundle at {directory} (missing {MODEL_FILE})")
    try:
        payload = json.loads(model_path.read_text(encoding="utf-8"))
        cox = CoxModel.from_dict(json.loads((directory / COX_FILE).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as err:
        raise DataError(f"could not read model bundle {directory}: {err}")

    forest = load_forest(directory / FOREST_FILE) if (directory / FOREST_FILE).exists() else None
    family = cox_quantile_family(cox)
    if payload["family_kind"] == FOREST_QUANTILE:
        family = load_event_family(directory / EVENT_FOREST_FILE)
    elif payload["family_kind"] == CT_TRUNCATED:
        if forest is None:
            raise DataError(f"bundle {directory} uses a truncated family but has no {FOREST_FILE}")
        family = truncate_family(family, forest, payload["truncation_beta"])

    query_weights = None
    if payload["method"] == "fixed":
        if forest is None:
            raise DataError(f"fixed-cutoff bundle {directory} has no {FOREST_FILE}")
        query_weights = cutoff_weight_function(forest, payload["c0"], payload["weight_cap"])

    calibration = None
    if payload.get("calibration") is not None:
        trace = pd.read_csv(directory / TRACE_FILE, comment="#", float_precision="round_trip")
        calibration = CalibrationResult.from_parts(payload["calibration"], trace)

    def array(key):
        value = payload.get(key)
        return None if value is None else np.asarray(value, dtype=float)

    model = LpbModel(
        method=payload["method"],
        alpha=float(payload["alpha"]),
        level=float(payload["level"]),
        family=family,
        correction=float(payload["correction"]),
        cox=cox,
        forest=forest,
        c0=payload.get("c0"),
        cutoff_scores=array("cutoff_scores"),
        cutoff_weights=array("cutoff_weights"),
        query_weights=query_weights,
        weight_cap=payload.get("weight_cap"),
        truncation_beta=payload.get("truncation_beta"),
        calibration=calibration,
        provenance=payload.get("provenance", {}),
    )
    Log.kv({"stage": "load_model", "result": "success", "path": str(directory), "method": model.method})
    return model
