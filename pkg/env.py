from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Optional

from dotenv import load_dotenv, set_key

# Load variables from .env if present
load_dotenv(override=True)


def get(key: str, default: Optional[str] = None) -> str:
    """Return an environment variable or raise if it's missing.

    Parameters
    ----------
    key : str
        Environment variable name.
    default : Optional[str]
        Fallback value if the variable is not set.
    """
    value = os.getenv(key, default)
    if value is None:
        raise KeyError(f"Missing required environment variable: {key}")
    return value


def thread_cap() -> int:
    """Upper bound on worker threads for chains and replicates (read on every call)."""
    raw = get("MSMA_THREADS", str(os.cpu_count() or 1))
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"MSMA_THREADS must be an integer, got '{raw}'") from exc
    if value < 1:
        raise ValueError(f"MSMA_THREADS must be >= 1, got {value}")
    return value


# Optional configuration
LOG_LEVEL = os.getenv("MSMA_LOG_LEVEL", "INFO").upper()


SETTING_PREFIX = "MSMA_"


def write_settings(updates: Mapping[str, object], path: str | Path = ".env") -> Path:
    """Write ``MSMA_*`` settings into *path*.

    Existing keys are edited in place and new ones appended; comments and
    unrelated lines are kept. ``None`` values are skipped.
    """
    foreign = sorted(k for k in updates if not k.startswith(SETTING_PREFIX))
    if foreign:
        raise ValueError(f"Only {SETTING_PREFIX}* settings can be written, got {', '.join(foreign)}")
    path = Path(path)
    path.touch()
    for key, value in updates.items():
        if value is not None:
            set_key(path, key, str(value), quote_mode="never")
    return path
