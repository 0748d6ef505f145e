"""Worker-count policy shared by every parallel stage."""
from __future__ import annotations

import os

DEFAULT_THREADS = 8
ENV_VAR = "VLOC_THREADS"


def worker_count(default: int = DEFAULT_THREADS) -> int:
    """Threads allowed by ``VLOC_THREADS`` (default 8), at least 1."""
    raw = os.environ.get(ENV_VAR, "").strip()
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default
