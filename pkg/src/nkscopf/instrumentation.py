"""Event counters proving the factorization-reuse and solve-reuse contracts."""

from __future__ import annotations

import threading
from contextlib import contextmanager

__all__ = ["counters", "record", "snapshot", "delta"]

_lock = threading.Lock()
counters: dict[str, int] = {}


def record(event: str, n: int = 1):
    with _lock:
        counters[event] = counters.get(event, 0) + n


def snapshot() -> dict[str, int]:
    with _lock:
        return dict(counters)


@contextmanager
def delta(out: dict):
    """Collect the counter increments that happen inside the block."""
    before = snapshot()
    try:
        yield out
    finally:
        after = snapshot()
        keys = set(before) | set(after)
        out.update({k: after.get(k, 0) - before.get(k, 0) for k in keys})
