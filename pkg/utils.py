from __future__ import annotations

import gc
import logging
import os
import sys
import time
import tracemalloc
import typing
from functools import wraps

import psutil
from pympler import asizeof

if typing.TYPE_CHECKING:
    from typing import *


MB_SIZE = 1024 * 1024
THREADS_ENV = "SPLAT_NUM_THREADS"

LOG_FORMAT = "[%(module)s.%(funcName)s] %(message)s"

logger = logging.getLogger(__name__)


def setup_logging(level: Union[int, str] = logging.INFO) -> None:
    """Configure the root logger once, with the `[module.function]` prefix."""
    if isinstance(level, str):
        level = getattr(logging, level.upper())
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(level)


def get_object_size_mb(obj: Any) -> float:
    """Get total memory occupied by object (and everything it references) in MB"""
    return asizeof.asizeof(obj) / MB_SIZE


def get_process_memory_usage_mb() -> float:
    """Get resident memory of the current process in MB"""
    process = psutil.Process(os.getpid())
    return process.memory_info().rss / MB_SIZE


def get_num_threads() -> int:
    """Tile worker count from SPLAT_NUM_THREADS (defaults to sequential)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1


def log_memory_usage(func):
    @wraps(func)
    def wrapper(*args, **kwargs):
        already_tracing = tracemalloc.is_tracing()
        if not already_tracing:
            tracemalloc.start()
        try:
            return func(*args, **kwargs)
        finally:
            _, peak = tracemalloc.get_traced_memory()
            if not already_tracing:
                tracemalloc.stop()
            logging.getLogger(func.__module__).info(
                "[%s.%s] Peak memory usage: %.2f MB", func.__module__, func.__name__, peak / MB_SIZE
            )

    return wrapper


def log_execution_time(func):
    @wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            elapsed = time.perf_counter() - start_time
            logging.getLogger(func.__module__).info(
                "[%s.%s] Execution time: %.2f seconds", func.__module__, func.__name__, elapsed
            )

    return wrapper


class Stopwatch:
    """Accumulating wall-clock timer in milliseconds."""

    __slots__ = ["_start", "elapsed_ms"]

    def __init__(self) -> None:
        self._start = 0.0
        self.elapsed_ms = 0.0

    def __enter__(self) -> Stopwatch:
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.elapsed_ms += (time.perf_counter() - self._start) * 1000.0


def collect_garbage() -> None:
    """Clean between independent runs so memory readings are comparable"""
    gc.collect()
