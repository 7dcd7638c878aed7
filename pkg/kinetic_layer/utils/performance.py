"""
Timing and thread-parallel batching utilities
"""

import concurrent.futures
import time
from functools import wraps
from typing import Any, Callable, Dict, List, Sequence, TypeVar

from ..utils.logger import get_logger

T = TypeVar("T")
R = TypeVar("R")


class PerformanceMonitor:
    """Monitor and track wall-clock timings of solver stages."""

    def __init__(self):
        """Initialize performance monitor."""
        self.logger = get_logger(__name__)
        self.metrics: Dict[str, List[float]] = {}
        self.start_times: Dict[str, float] = {}

    def start_timer(self, operation: str) -> None:
        """Start timing an operation."""
        self.start_times[operation] = time.perf_counter()

    def end_timer(self, operation: str) -> float:
        """End timing an operation and return duration."""
        if operation not in self.start_times:
            return 0.0

        duration = time.perf_counter() - self.start_times.pop(operation)
        self.metrics.setdefault(operation, []).append(duration)
        return duration

    def get_stats(self, operation: str) -> Dict[str, float]:
        """Get statistics for an operation."""
        durations = self.metrics.get(operation)
        if not durations:
            return {}

        return {
            "count": len(durations),
            "total": sum(durations),
            "average": sum(durations) / len(durations),
            "min": min(durations),
            "max": max(durations),
        }

    def get_all_stats(self) -> Dict[str, Dict[str, float]]:
        """Get statistics for all operations."""
        return {op: self.get_stats(op) for op in self.metrics}


def time_operation(operation_name: str):
    """Decorator timing a method on any object carrying a ``performance_monitor``."""

    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            monitor = getattr(args[0], "performance_monitor", None) if args else None
            if monitor:
                monitor.start_timer(operation_name)

            try:
                return func(*args, **kwargs)
            finally:
                if monitor:
                    duration = monitor.end_timer(operation_name)
                    monitor.logger.debug(f"{operation_name} took {duration:.2f} seconds")

        return wrapper

    return decorator


class BatchProcessor:
    """Split an index range into batches and map a function over them.

    Results are always returned in batch order, whatever order the workers
    finish in, so that any reduction done by the caller is reproducible.
    """

    def __init__(self, batch_size: int = 256, max_workers: int = 1):
        """
        Initialize batch processor.

        Args:
            batch_size: Number of items per batch
            max_workers: Maximum number of worker threads (1 runs inline)
        """
        self.batch_size = max(1, batch_size)
        self.max_workers = max(1, max_workers)
        self.logger = get_logger(__name__)

    def batches(self, count: int) -> List[slice]:
        """Contiguous slices covering ``range(count)``."""
        return [
            slice(start, min(start + self.batch_size, count))
            for start in range(0, count, self.batch_size)
        ]

    def process_batches(
        self,
        items: Sequence[T],
        processor_func: Callable[[T], R],
    ) -> List[R]:
        """
        Apply ``processor_func`` to each item, in parallel when workers > 1.

        Args:
            items: Work items (typically slices from ``batches``)
            processor_func: Function applied to each item

        Returns:
            Results in the order of ``items``
        """

        if not items:
            return []

        if self.max_workers == 1 or len(items) == 1:
            return [processor_func(item) for item in items]

        self.logger.debug(f"Processing {len(items)} batches on {self.max_workers} threads")

        results: List[Any] = [None] * len(items)
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            future_to_index = {
                executor.submit(processor_func, item): i for i, item in enumerate(items)
            }

            for future in concurrent.futures.as_completed(future_to_index):
                # errors propagate to the caller
                results[future_to_index[future]] = future.result()

        return results
