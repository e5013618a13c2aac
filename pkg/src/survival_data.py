"""
Survival data model: records, datasets, CSV I/O, deterministic splitting and
seeded randomness.

Modeling assumption: the censoring time C is observed for every unit (Type I
censoring) and is conditionally independent of the survival time T given the
covariates X. Only T~ = min(T, C) of the survival time is seen. A unit counts
as an event when otime < ctime; otime == ctime is treated as censored.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.errors import DataError
from src.logging_helper import Log

COVARIATE_PATTERN = re.compile(r"^x(\d+)$")
CTIME = "ctime"
OTIME = "otime"
TRUE_TIME = "true_time"


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """
    The package's single generator: numpy's PCG64 seeded from a 64-bit integer.

    Streams are split with numpy SeedSequence (see spawn_seeds), so every
    stochastic operation takes an explicit seed and results are bit-reproducible.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def spawn_seeds(master_seed: int, count: int) -> List[int]:
    """Derive `count` independent 64-bit child seeds from a master seed."""
    children = np.random.SeedSequence(int(master_seed)).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]


def sklearn_seed(seed: int) -> int:
    """Map a 64-bit seed onto the 32-bit range scikit-learn accepts."""
    return int(np.random.SeedSequence(int(seed)).generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# Records and datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurvivalRecord:
    """One observation: covariates, censoring time, observed time, optional latent time."""

    x: Tuple[float, ...]
    ctime: float
    otime: float
    true_time: Optional[float] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.x)):
            raise DataError("covariates must be finite")
        if self.ctime < 0 or self.otime < 0:
            raise DataError("times must be nonnegative")
        if self.otime > self.ctime:
            raise DataError(f"otime {self.otime} exceeds ctime {self.ctime}")
        if self.true_time is not None:
            if self.true_time < 0:
                raise DataError("true_time must be nonnegative")
            if self.otime != min(self.true_time, self.ctime):
                raise DataError("otime must equal min(true_time, ctime)")

    @property
    def is_event(self) -> bool:
        return self.otime < self.ctime


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Column-oriented container of survival records.

    X has shape (n, p); ctime, otime and (optionally) true_time have shape (n,).
    """

    X: np.ndarray
    ctime: np.ndarray
    otime: np.ndarray
    true_time: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        ctime = np.array(self.ctime, dtype=float).ravel()
        otime = np.array(self.otime, dtype=float).ravel()
        n = X.shape[0]
        if ctime.shape != (n,) or otime.shape != (n,):
            raise DataError("ctime and otime must have one entry per covariate row")
        if X.shape[1] < 1:
            raise DataError("at least one covariate column is required")
        if not np.all(np.isfinite(X)):
            raise DataError("covariates must be finite")
        if np.isnan(ctime).any() or np.isnan(otime).any():
            raise DataError("times must not be missing")
        if (ctime < 0).any() or (otime < 0).any():
            raise DataError("times must be nonnegative")
        if (otime > ctime).any():
            raise DataError("otime exceeds ctime for at least one row")
        true_time = self.true_time
        if true_time is not None:
            true_time = np.array(true_time, dtype=float).ravel()
            if true_time.shape != (n,):
                raise DataError("true_time must have one entry per row")
            if (true_time < 0).any() or np.isnan(true_time).any():
                raise DataError("true_time must be nonnegative")
            if not np.array_equal(otime, np.minimum(true_time, ctime)):
                raise DataError("otime must equal min(true_time, ctime) row by row")
        for name, value in (("X", X), ("ctime", ctime), ("otime", otime), ("true_time", true_time)):
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_records(cls, records: Sequence[SurvivalRecord]) -> "Dataset":
        if not records:
            raise DataError("cannot build a dataset from zero records")
        dims = {len(r.x) for r in records}
        if len(dims) != 1:
            raise DataError(f"records disagree on covariate dimension: {sorted(dims)}")
        has_truth = [r.true_time is not None for r in records]
        if any(has_truth) and not all(has_truth):
            raise DataError("true_time must be present on all records or none")
        return cls(
            X=np.array([r.x for r in records], dtype=float),
            ctime=np.array([r.ctime for r in records], dtype=float),
            otime=np.array([r.otime for r in records], dtype=float),
            true_time=np.array([r.true_time for r in records], dtype=float) if all(has_truth) else None,
        )

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def events(self) -> np.ndarray:
        """Event indicator; equality otime == ctime counts as censored."""
        return self.otime < self.ctime

    @property
    def has_true_time(self) -> bool:
        return self.true_time is not None

    @property
    def records(self) -> List[SurvivalRecord]:
        truth = self.true_time
        return [
            SurvivalRecord(
                x=tuple(float(v) for v in self.X[i]),
                ctime=float(self.ctime[i]),
                otime=float(self.otime[i]),
                true_time=None if truth is None else float(truth[i]),
            )
            for i in range(self.n)
        ]

    def __len__(self) -> int:
        return self.n

    def subset(self, index: Iterable[int]) -> "Dataset":
        index = np.asarray(list(index) if not isinstance(index, np.ndarray) else index, dtype=int)
        return Dataset(
            X=self.X[index],
            ctime=self.ctime[index],
            otime=self.otime[index],
            true_time=None if self.true_time is None else self.true_time[index],
        )

    def without_true_time(self) -> "Dataset":
        return Dataset(X=self.X, ctime=self.ctime, otime=self.otime)

    def require_nonempty(self, what: str = "dataset") -> None:
        if self.n == 0:
            raise DataError(f"{what} is empty")


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Training fraction and seed for the two-fold split."""

    train_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


def split(data: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset]:
    """
    Partition the data into a training fold of floor(n * train_fraction) rows
    and a calibration fold with the remainder. Deterministic given the seed.
    """
    n = data.n
    if n < 4:
        raise DataError(f"dataset too small to split: n={n}, need at least 4")
    n_train = int(np.floor(n * spec.train_fraction))
    if n_train < 1 or n - n_train < 2:
        raise DataError(
            f"split of n={n} with train_fraction={spec.train_fraction} leaves "
            f"{n_train} training and {n - n_train} calibration rows"
        )
    permutation = make_rng(spec.seed).permutation(n)
    train_index = np.sort(permutation[:n_train])
    cal_index = np.sort(permutation[n_train:])
    Log.kv({"stage": "split", "result": "success", "n_train": n_train, "n_cal": n - n_train, "seed": spec.seed})
    return data.subset(train_index), data.subset(cal_index)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def covariate_columns(p: int) -> List[str]:
    return [f"x{j}" for j in range(1, p + 1)]


def _ordered_covariates(frame: pd.DataFrame) -> List[str]:
    found = []
    for column in frame.columns:
        match = COVARIATE_PATTERN.match(str(column))
        if match:
            found.append((int(match.group(1)), str(column)))
    found.sort()
    expected = list(range(1, len(found) + 1))
    if [j for j, _ in found] != expected:
        raise DataError(f"covariate columns must be x1..xp without gaps, found {[c for _, c in found]}")
    return [c for _, c in found]


def _read_frame(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, comment="#", float_precision="round_trip")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
        raise DataError(f"could not parse CSV {path}: {err}")


def _numeric(frame: pd.DataFrame, columns: List[str], path: Path) -> np.ndarray:
    try:
        values = frame[columns].to_numpy(dtype=float)
    except (ValueError, TypeError) as err:
        raise DataError(f"non-numeric values in {path}: {err}")
    if np.isnan(values).any():
        raise DataError(f"missing values in {path}")
    return values


def dataset_from_frame(frame: pd.DataFrame, source: str = "<frame>") -> Dataset:
    x_columns = _ordered_covariates(frame)
    if not x_columns:
        raise DataError(f"{source} has no covariate columns x1..xp")
    missing = [c for c in (CTIME, OTIME) if c not in frame.columns]
    if missing:
        raise DataError(f"{source} is missing required columns {missing}")
    path = Path(source)
    X = _numeric(frame, x_columns, path).reshape(-1, len(x_columns))
    ctime = _numeric(frame, [CTIME], path).ravel()
    otime = _numeric(frame, [OTIME], path).ravel()
    true_time = _numeric(frame, [TRUE_TIME], path).ravel() if TRUE_TIME in frame.columns else None
    return Dataset(X=X, ctime=ctime, otime=otime, true_time=true_time)


def read_dataset(path) -> Dataset:
    """Read a dataset CSV with header x1,...,xp,ctime,otime[,true_time]."""
    path = Path(path)
    frame = _read_frame(path)
    data = dataset_from_frame(frame, str(path))
    Log.kv({"stage": "read_dataset", "result": "success", "path": str(path), "n": data.n, "p": data.p})
    return data


def read_covariates(path, p: Optional[int] = None) -> np.ndarray:
    """Read the x1..xp columns of a CSV; other columns are ignored."""
    path = Path(path)
    frame = _read_frame(path)
    x_columns = _ordered_covariates(frame)
    if p is not None and len(x_columns) != p:
        raise DataError(f"dimension mismatch: model expects {p} covariates, {path} has {len(x_columns)}")
    if not x_columns:
        raise DataError(f"{path} has no covariate columns x1..xp")
    return _numeric(frame, x_columns, path).reshape(-1, len(x_columns))


def dataset_to_frame(data: Dataset) -> pd.DataFrame:
    columns = {name: data.X[:, j] for j, name in enumerate(covariate_columns(data.p))}
    columns[CTIME] = data.ctime
    columns[OTIME] = data.otime
    if data.true_time is not None:
        columns[TRUE_TIME] = data.true_time
    return pd.DataFrame(columns)


def write_frame(frame: pd.DataFrame, path, header_lines: Sequence[str] = ()) -> None:
    """Write a CSV preceded by '# ' provenance comment lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        for line in header_lines:
            handle.write(f"# {line}\n")
        frame.to_csv(handle, index=False, lineterminator="\n")


def write_dataset(data: Dataset, path, header_lines: Sequence[str] = ()) -> None:
    write_frame(dataset_to_frame(data), path, header_lines)
    Log.kv({"stage": "write_dataset", "result": "success", "path": str(path), "n": data.n})
