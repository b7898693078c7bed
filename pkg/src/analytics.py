"""
Run Tracking
Stage timings, per-epoch loss histories, counters and errors for one pipeline run
"""

import logging
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

from .artifacts import write_json

logger = logging.getLogger(__name__)


class RunTracker:
    """Thread-safe accumulation of run metrics, exported as metrics.json"""

    def __init__(self):
        self.lock = threading.Lock()
        self.start_time = time.time()

        self.stats: Dict[str, float] = defaultdict(float)
        self.stage_times: Dict[str, List[float]] = defaultdict(list)
        self.loss_history: Dict[str, List[float]] = defaultdict(list)
        self.error_counts: Dict[str, int] = defaultdict(int)
        self.errors: List[Dict[str, str]] = []

    def reset(self):
        """Forget everything recorded so far"""
        with self.lock:
            self.start_time = time.time()
            self.stats.clear()
            self.stage_times.clear()
            self.loss_history.clear()
            self.error_counts.clear()
            self.errors.clear()

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Time a pipeline stage; failures are recorded and re-raised"""
        started = time.perf_counter()
        logger.info(f"Stage {name} started")
        try:
            yield
        except Exception as e:
            self.track_error(name, e)
            raise
        finally:
            elapsed = time.perf_counter() - started
            with self.lock:
                self.stage_times[name].append(elapsed)
            logger.info(f"Stage {name} finished in {elapsed:.2f}s")

    def track_epoch(self, stage: str, epoch: int, loss: float):
        """Record the mean loss of one training epoch"""
        with self.lock:
            self.loss_history[stage].append(float(loss))
            self.stats[f"{stage}_epochs"] += 1
        logger.debug(f"{stage} epoch {epoch}: loss {loss:.6f}")

    def increment(self, counter: str, amount: float = 1):
        with self.lock:
            self.stats[counter] += amount

    def track_error(self, stage: str, error: Union[str, Exception]):
        message = str(error)
        kind = type(error).__name__ if isinstance(error, Exception) else "error"
        with self.lock:
            self.error_counts[kind] += 1
            self.errors.append({"stage": stage, "type": kind, "message": message})

    def get_metrics(self) -> Dict[str, Any]:
        """Snapshot of everything recorded"""
        with self.lock:
            return {
                "generated": datetime.now().isoformat(),
                "wall_time": round(time.time() - self.start_time, 3),
                "stage_times": {k: [round(t, 4) for t in v] for k, v in self.stage_times.items()},
                "loss_history": {k: list(v) for k, v in self.loss_history.items()},
                "counters": dict(self.stats),
                "error_metrics": {
                    "error_distribution": dict(self.error_counts),
                    "total_errors": sum(self.error_counts.values()),
                    "errors": list(self.errors),
                },
            }

    def export(self, directory: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
        """Write metrics.json into directory"""
        metrics = self.get_metrics()
        if extra:
            metrics.update(extra)
        path = write_json(Path(directory) / "metrics.json", metrics)
        logger.info(f"Saved run metrics to {path}")
        return path


# Global run tracker
tracker = RunTracker()
