"""Worker-count policy shared by every parallel code path."""

from __future__ import annotations

import os

THREADS_ENV = "LSF_THREADS"


class ThreadSettingError(ValueError):
    pass


def thread_limit() -> int:
    """Worker cap from ``LSF_THREADS``; defaults to the machine's CPU count."""
    text = os.environ.get(THREADS_ENV, "").strip()
    if not text:
        return os.cpu_count() or 1
    try:
        n = int(text)
    except ValueError:
        n = 0
    if n < 1:
        raise ThreadSettingError(f"{THREADS_ENV} must be a positive integer, got {text!r}")
    return n
