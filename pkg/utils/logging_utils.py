from __future__ import annotations

import datetime
import logging
import os
from typing import Optional


LOG_LEVEL_ENV = "LBSC_LOG_LEVEL"
ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
LOGS_DIR = os.path.join(ROOT_DIR, "logs")


def _resolve_level(level: Optional[str] = None) -> int:
    name = (level or os.environ.get(LOG_LEVEL_ENV) or "INFO").upper()
    resolved = logging.getLevelName(name)
    return resolved if isinstance(resolved, int) else logging.INFO


def get_logger(name: str = "lbsc", level: Optional[str] = None) -> logging.Logger:
    """Create or get a configured logger.

    - Level comes from ``level`` or the ``LBSC_LOG_LEVEL`` environment variable (INFO by default).
    - StreamHandler with a simple format; handlers are attached once per logger.
    """
    logger = logging.getLogger(name)
    if logger.handlers:
        if level is not None:
            logger.setLevel(_resolve_level(level))
        return logger
    logger.setLevel(_resolve_level(level))
    handler = logging.StreamHandler()
    fmt = logging.Formatter("[%(levelname)s] %(name)s: %(message)s")
    handler.setFormatter(fmt)
    logger.addHandler(handler)
    logger.propagate = False
    return logger


def append_run_summary(line: str, logs_dir: Optional[str] = None) -> str:
    """Append one timestamped line to ``logs/<YYYY-MM-DD>.txt`` and return the file path."""
    target_dir = logs_dir or LOGS_DIR
    os.makedirs(target_dir, exist_ok=True)
    now = datetime.datetime.now()
    log_file = os.path.join(target_dir, f"{now.strftime('%Y-%m-%d')}.txt")
    with open(log_file, "a", encoding="utf-8") as f:
        f.write(f"[{now.strftime('%H:%M:%S')}] {line}\n")
    return log_file


def refresh_levels(level: Optional[str] = None, prefix: str = "lbsc") -> None:
    """Re-apply the level to every logger under ``prefix`` (after ``.env`` has been loaded)."""
    resolved = _resolve_level(level)
    for name, obj in logging.root.manager.loggerDict.items():
        if name.startswith(prefix) and isinstance(obj, logging.Logger):
            obj.setLevel(resolved)
