"""
Terminal-first logging for the pipeline stages.

Every line is prefixed ([INFO], [WARN], [ERROR], [KV]) so runs can be grepped;
errors are mirrored to stderr and never silenced. When CONFORMAL_SURVIVAL_LOG_DIR
is set, each process also appends to its own timestamped file there.
"""

import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Mapping, Optional, TextIO

LOG_DIR_ENV = "CONFORMAL_SURVIVAL_LOG_DIR"
QUIET_ENV = "CONFORMAL_SURVIVAL_QUIET"

_log_file: Optional[TextIO] = None
_log_file_path: Optional[Path] = None
_quiet = os.getenv(QUIET_ENV, "").lower() in ("1", "true", "yes")


def _open_log_file() -> Optional[TextIO]:
    global _log_file, _log_file_path
    if _log_file is not None:
        return _log_file
    log_dir = os.getenv(LOG_DIR_ENV)
    if not log_dir:
        return None
    try:
        directory = Path(log_dir)
        directory.mkdir(parents=True, exist_ok=True)
        stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        _log_file_path = directory / f"conformal_survival_{stamp}_{os.getpid()}.log"
        _log_file = open(_log_file_path, "a", encoding="utf-8")
    except OSError as err:
        print(f"[WARN] cannot open a log file in {log_dir}: {err}", file=sys.stderr)
        return None
    return _log_file


def _emit(line: str, to_stderr: bool = False, force: bool = False) -> None:
    if _quiet and not force:
        return
    print(line, file=sys.stderr if to_stderr else sys.stdout)
    handle = _open_log_file()
    if handle is not None:
        handle.write(line + "\n")
        handle.flush()


class Log:
    """Prefixed stdout lines for stage progress; `kv` records are one line per stage."""

    @staticmethod
    def section(title: str) -> None:
        _emit("")
        _emit(f"===== {title} =====")

    @staticmethod
    def info(message: str) -> None:
        _emit(f"[INFO] {message}")

    @staticmethod
    def warn(message: str) -> None:
        _emit(f"[WARN] {message}")

    @staticmethod
    def error(message: str) -> None:
        _emit(f"[ERROR] {message}", to_stderr=True, force=True)

    @staticmethod
    def kv(record: Mapping[str, Any]) -> None:
        """`[KV] stage=cox_fit | result=success | ...`, keys in insertion order."""
        _emit("[KV] " + " | ".join(f"{key}={value}" for key, value in record.items()))

    @staticmethod
    def set_quiet(quiet: bool) -> None:
        """Toggle everything except errors."""
        global _quiet
        _quiet = quiet

    @staticmethod
    def get_log_path() -> Optional[str]:
        _open_log_file()
        return None if _log_file_path is None else str(_log_file_path)
