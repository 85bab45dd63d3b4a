import csv
import math

import numpy as np
import pytest

from sanran.errors import DataError
from sanran.report import CURVE_COLUMNS, CsvAppender, EpochRecord, RunReport, format_value


def sample_report(wall_clock=1.5):
    report = RunReport(method="clsdf", wall_clock=wall_clock)
    report.add_epoch(EpochRecord(0, "warm_up", 0.02, 0.5, accuracy_a=0.45))
    report.add_epoch(EpochRecord(1, "ssl", 0.02, 0.7, lambda_u=1.5625, clean_a=30, noisy_a=10))
    report.add_epoch(EpochRecord(2, "ssl", 0.01, 0.6))
    report.confusion = [[3, 1], [0, 4]]
    report.provenance = [{"epoch": 1, "consumer": "A", "producer": "B"}]
    return report


def test_format_value():
    assert format_value(0.1) == "0.1"
    assert format_value(np.float32(0.5)) == "0.5"
    assert format_value(float("nan")) == "nan"
    assert format_value(7) == "7"


def test_final_and_best_accuracy():
    report = sample_report()
    assert report.final_accuracy == 0.6
    assert report.best_accuracy == 0.7
    assert report.curve("test_accuracy") == [0.5, 0.7, 0.6]


def test_fingerprint_ignores_wall_clock():
    assert sample_report(1.0).same_result(sample_report(99.0))
    other = sample_report()
    other.confusion = [[4, 0], [0, 4]]
    assert not sample_report().same_result(other)


def test_write_and_load(tmp_path):
    report = sample_report()
    report.write(tmp_path)
    loaded = RunReport.load(tmp_path)
    assert loaded.same_result(report)
    assert math.isnan(loaded.epochs[0].lambda_u)

    with open(tmp_path / "curves.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == CURVE_COLUMNS
    assert len(rows) == 4
    assert rows[2][CURVE_COLUMNS.index("lambda_u")] == "1.5625"
    assert rows[1][CURVE_COLUMNS.index("mse_a")] == "nan"


def test_load_missing_report(tmp_path):
    with pytest.raises(DataError):
        RunReport.load(tmp_path)


def test_csv_appender(tmp_path):
    path = tmp_path / "logs" / "training.csv"
    CsvAppender(path, ["epoch", "loss"]).append(epoch=0, loss=0.25)
    # reopening keeps the existing header and rows
    appender = CsvAppender(path, ["epoch", "loss"])
    appender.append(epoch=1)
    with pytest.raises(KeyError):
        appender.append(epoch=2, accuracy=0.9)
    assert path.read_text(encoding="utf-8").splitlines() == ["epoch,loss", "0,0.25", "1,"]

    CsvAppender(path, ["epoch", "loss"], fresh=True).append(epoch=5, loss=0.5)
    assert path.read_text(encoding="utf-8").splitlines() == ["epoch,loss", "5,0.5"]
