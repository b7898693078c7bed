"""
Batch Processing
Map a function over indexed work items on a thread pool with ordered results
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence

from .analytics import tracker

logger = logging.getLogger(__name__)


class ProcessingStatus(Enum):
    """Processing status enumeration"""

    PENDING = "pending"
    PROCESSING = "processing"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class BatchJob:
    """Outcome of one batch: results in input order, per-item errors"""

    job_id: str
    n_items: int
    status: ProcessingStatus = ProcessingStatus.PENDING
    progress: float = 0.0
    start_time: Optional[float] = None
    end_time: Optional[float] = None
    results: List[Any] = field(default_factory=list)
    errors: Dict[int, str] = field(default_factory=dict)
    exceptions: Dict[int, Exception] = field(default_factory=dict, repr=False)

    @property
    def processing_time(self) -> Optional[float]:
        if self.start_time is None or self.end_time is None:
            return None
        return self.end_time - self.start_time

    def raise_for_errors(self):
        """Re-raise the first recorded item failure"""
        if self.errors:
            index = min(self.errors)
            if index in self.exceptions:
                raise self.exceptions[index]
            raise RuntimeError(f"{self.job_id}: item {index} failed: {self.errors[index]}")

    def summary(self) -> Dict[str, Any]:
        return {
            "job_id": self.job_id,
            "status": self.status.value,
            "total_items": self.n_items,
            "failed_items": len(self.errors),
            "processing_time": self.processing_time,
        }


class BatchRunner:
    """Runs fn(index, item) over items; max_workers=1 runs inline in input order"""

    def __init__(self, max_workers: int = 1):
        if max_workers < 1:
            raise ValueError(f"max_workers must be >= 1, got {max_workers}")
        self.max_workers = max_workers

    def run(
        self,
        job_id: str,
        fn: Callable[[int, Any], Any],
        items: Sequence[Any],
        progress_callback: Optional[Callable[[float, int, int], None]] = None,
    ) -> BatchJob:
        """
        Process every item, collecting failures instead of aborting

        Args:
            job_id: Name used in logs and errors
            fn: Work function taking (index, item)
            items: Work items
            progress_callback: Called with (percent, completed, total)

        Returns:
            BatchJob with results ordered like items (None where an item failed)
        """
        job = BatchJob(job_id=job_id, n_items=len(items))
        job.status = ProcessingStatus.PROCESSING
        job.start_time = time.time()
        job.results = [None] * len(items)
        logger.info(f"Starting batch {job_id} with {len(items)} items on {self.max_workers} worker(s)")

        completed = 0

        def _done(index: int, result: Any = None, error: Optional[Exception] = None):
            nonlocal completed
            if error is None:
                job.results[index] = result
            else:
                job.errors[index] = str(error)
                job.exceptions[index] = error
                tracker.track_error(job_id, error)
                logger.error(f"Batch {job_id} item {index} failed: {error}")
            completed += 1
            job.progress = completed / max(len(items), 1) * 100
            if progress_callback:
                progress_callback(job.progress, completed, len(items))

        if self.max_workers == 1:
            for index, item in enumerate(items):
                try:
                    _done(index, fn(index, item))
                except Exception as e:
                    _done(index, error=e)
        else:
            with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
                futures = {executor.submit(fn, index, item): index for index, item in enumerate(items)}
                for future in as_completed(futures):
                    index = futures[future]
                    try:
                        _done(index, future.result())
                    except Exception as e:
                        _done(index, error=e)

        job.end_time = time.time()
        job.status = ProcessingStatus.FAILED if job.errors else ProcessingStatus.COMPLETED
        logger.info(f"Batch {job_id} {job.status.value} in {job.processing_time:.2f}s ({len(job.errors)} errors)")
        return job
