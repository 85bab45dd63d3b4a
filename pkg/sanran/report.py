"""Run results: per-epoch curves, final numbers, and their on-disk forms."""

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from sanran.errors import DataError

NAN = float("nan")


def format_value(value) -> str:
    """Locale-independent CSV cell."""
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


@dataclass
class EpochRecord:
    epoch: int
    phase: str  # warm_up | ssl | ce
    lr: float
    test_accuracy: float
    accuracy_a: float = NAN
    accuracy_b: float = NAN
    ce_a: float = NAN
    ce_b: float = NAN
    mse_a: float = NAN
    mse_b: float = NAN
    lambda_u: float = NAN
    division_accuracy_a: float = NAN
    division_error_a: float = NAN
    division_accuracy_b: float = NAN
    division_error_b: float = NAN
    clean_a: int = -1
    noisy_a: int = -1
    clean_b: int = -1
    noisy_b: int = -1


CURVE_COLUMNS = [f.name for f in fields(EpochRecord)]


@dataclass
class RunReport:
    method: str
    epochs: list[EpochRecord] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)
    final_accuracy: float = NAN
    best_accuracy: float = NAN
    wall_clock: float = 0.0

    def add_epoch(self, record: EpochRecord) -> None:
        self.epochs.append(record)
        self.final_accuracy = record.test_accuracy
        if math.isnan(self.best_accuracy) or record.test_accuracy > self.best_accuracy:
            self.best_accuracy = record.test_accuracy

    def curve(self, column: str) -> list:
        return [getattr(r, column) for r in self.epochs]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "final_accuracy": self.final_accuracy,
            "best_accuracy": self.best_accuracy,
            "wall_clock": self.wall_clock,
            "confusion": self.confusion,
            "provenance": self.provenance,
            "epochs": [asdict(r) for r in self.epochs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            method=d["method"],
            epochs=[EpochRecord(**r) for r in d.get("epochs", [])],
            provenance=list(d.get("provenance", [])),
            confusion=[list(row) for row in d.get("confusion", [])],
            final_accuracy=float(d.get("final_accuracy", NAN)),
            best_accuracy=float(d.get("best_accuracy", NAN)),
            wall_clock=float(d.get("wall_clock", 0.0)),
        )

    def fingerprint(self) -> str:
        """Serialized form without wall-clock time; equal for reproduced runs."""
        d = self.to_dict()
        d.pop("wall_clock")
        return yaml.safe_dump(d, sort_keys=True)

    def same_result(self, other: "RunReport") -> bool:
        return self.fingerprint() == other.fingerprint()

    def write(self, run_dir: Path) -> None:
        run_dir = Path(run_dir)
        text = yaml.safe_dump(self.to_dict(), sort_keys=False)
        (run_dir / "report.yaml").write_text(text, encoding="utf-8")
        write_curves(run_dir / "curves.csv", self)

    @classmethod
    def load(cls, run_dir: Path) -> "RunReport":
        path = Path(run_dir) / "report.yaml"
        if not path.exists():
            raise DataError(f"no report.yaml in {run_dir}")
        return cls.from_dict(yaml.safe_load(path.read_text(encoding="utf-8")))


def write_curves(path: Path, report: RunReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CURVE_COLUMNS)
        for record in report.epochs:
            writer.writerow([format_value(getattr(record, c)) for c in CURVE_COLUMNS])


class CsvAppender:
    """Append rows to a CSV file, writing the header when the file is new.

    With fresh=True any earlier content is discarded.
    """

    def __init__(self, path: Path, columns: list[str], fresh: bool = False):
        self.path = Path(path)
        self.columns = columns
        if fresh or not self.path.exists() or self.path.stat().st_size == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(columns)

    def append(self, **row) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown CSV columns: {sorted(unknown)}")
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow([format_value(row.get(c, "")) for c in self.columns])


TRAINING_LOG_COLUMNS = [
    "epoch", "branch", "phase", "ce", "mse", "lambda_u", "num_clean", "num_noisy", "test_accuracy",
]
DIVISION_COLUMNS = [
    "epoch", "branch", "class", "w0", "w1", "mu0", "mu1", "var0", "var1",
    "num_clean", "division_accuracy", "division_error",
]
