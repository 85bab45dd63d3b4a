"""Timestamped run log. One JSON object per line, for analysis and replay."""

import json
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np


def _plain(value: Any) -> Any:
    """numpy scalars/arrays -> JSON-native values; NaN -> None."""
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return None if math.isnan(value) else value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass
class LogEntry:
    ts: str
    kind: str  # "config" | "warm_up_epoch" | "division" | "division_consumed" | "ssl_epoch" | ...
    branch: str | None  # "A" | "B" | None
    payload: dict[str, Any] = field(default_factory=dict)

    def to_line(self) -> str:
        return json.dumps(
            {"ts": self.ts, "kind": self.kind, "branch": self.branch, **_plain(self.payload)},
            ensure_ascii=False,
        ) + "\n"


class RunLogger:
    """Per-run event log (run.log in the run directory). Safe to share between branch threads."""

    def __init__(self, run_dir: Path, fresh: bool = False):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.run_dir / "run.log"
        self._file = open(self.log_path, "w" if fresh else "a", encoding="utf-8")
        self._lock = threading.Lock()

    def _ts(self) -> str:
        return datetime.now(timezone.utc).isoformat()

    def log(self, kind: str, branch: str | None = None, **payload: Any) -> None:
        line = LogEntry(ts=self._ts(), kind=kind, branch=branch, payload=payload).to_line()
        with self._lock:
            self._file.write(line)
            self._file.flush()

    def config(self, config: dict) -> None:
        self.log("config", config=config)

    def warm_up_epoch(self, branch: str, epoch: int, loss: float) -> None:
        self.log("warm_up_epoch", branch=branch, epoch=epoch, loss=loss)

    def division(
        self, branch: str, epoch: int, num_clean: int, num_noisy: int,
        accuracy: float, error: float,
    ) -> None:
        self.log(
            "division", branch=branch, epoch=epoch, num_clean=num_clean, num_noisy=num_noisy,
            division_accuracy=accuracy, division_error=error,
        )

    def division_consumed(self, consumer: str, producer: str, epoch: int) -> None:
        self.log("division_consumed", branch=consumer, producer=producer, epoch=epoch)

    def ssl_epoch(self, branch: str, epoch: int, **losses: Any) -> None:
        self.log("ssl_epoch", branch=branch, epoch=epoch, **losses)

    def evaluation(self, epoch: int, accuracy: float, **per_branch: Any) -> None:
        self.log("evaluation", epoch=epoch, accuracy=accuracy, **per_branch)

    def checkpoint(self, path: Path, epoch: int) -> None:
        self.log("checkpoint", path=str(path), epoch=epoch)

    def close(self) -> None:
        self._file.close()


class NullLogger(RunLogger):
    """Drop-in logger for runs without a run directory."""

    def __init__(self):
        self._lock = threading.Lock()

    def log(self, kind: str, branch: str | None = None, **payload: Any) -> None:
        pass

    def close(self) -> None:
        pass
