import csv

import pytest

from sanran import autodiff as ad
from sanran import harness
from sanran.cli import main


@pytest.fixture
def config_path(tiny_config, tmp_path):
    return tmp_path / "sanran.yaml"


def exit_code(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    return info.value.code


def test_help(capsys):
    main(["help"])
    out = capsys.readouterr().out
    assert "gen-data" in out and "inject-noise" in out


def test_unknown_command():
    assert exit_code(["frobnicate"]) == 1


def test_missing_config_exits_2(tmp_path):
    assert exit_code(["gen-data", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_invalid_override_exits_2(config_path):
    assert exit_code(["inject-noise", "--config", str(config_path), "--noise-rate", "1.5"]) == 2


def test_missing_dataset_exits_3(config_path):
    assert exit_code(["inject-noise", "--config", str(config_path)]) == 3


def test_eval_of_a_directory_exits_3(tmp_path, capsys):
    assert exit_code(["eval", str(tmp_path)]) == 3
    assert "DataError" in capsys.readouterr().out


def test_empty_histogram_binning_exits_2(config_path):
    assert exit_code(["loss-hist", "--config", str(config_path), "--bins", "0"]) == 2


def test_unexpected_errors_are_one_line(config_path, monkeypatch, capsys):
    def broken(*args, **kwargs):
        raise ValueError("boom")

    monkeypatch.setattr(harness, "generate_dataset", broken)
    assert exit_code(["gen-data", "--config", str(config_path)]) == 1
    out = capsys.readouterr().out
    assert "ValueError: boom" in out
    assert "Traceback" not in out


def test_debug_flag_enables_non_finite_checks(config_path, monkeypatch):
    seen = []
    monkeypatch.setattr(harness, "generate_dataset", lambda config: seen.append(ad._debug))
    main(["gen-data", "--config", str(config_path), "--debug"])
    main(["gen-data", "--config", str(config_path)])
    assert seen == [True, False]
    assert not ad._debug


def test_init(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    main(["init"])
    assert (tmp_path / ".sanran" / "config" / "sanran.yaml").exists()
    main(["init"])
    assert "already exists" in capsys.readouterr().out


def test_gen_data_and_inject_noise(config_path, tiny_config, capsys):
    main(["gen-data", "--config", str(config_path)])
    main(["inject-noise", "--config", str(config_path), "--noise-kind", "asym", "--noise-rate", "0.3"])
    assert "18 training samples" in capsys.readouterr().out

    root = tiny_config.data.root
    with open(f"{root}/audit.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 18
    flipped = [r for r in rows if r["true_label"] != r["train_label"]]
    for r in flipped:
        assert int(r["train_label"]) == (int(r["true_label"]) - 1) % 3


@pytest.mark.slow
def test_train_eval_and_export(config_path, tiny_config, tmp_path, capsys):
    main(["gen-data", "--config", str(config_path)])
    out = tmp_path / "cli-run"
    main(["train", "--config", str(config_path), "--epochs", "2", "--out", str(out)])
    assert (out / "report.yaml").exists()

    main(["eval", str(out / "checkpoints" / "epoch-002.ckpt")])
    assert "Test accuracy" in capsys.readouterr().out

    main(["export-plots", str(out)])
    assert (out / "plots" / "accuracy.csv").exists()
    assert (out / "plots" / "division.csv").exists()

    ckpt = out / "checkpoints" / "epoch-002.ckpt"
    main(["export-plots", str(out), "--checkpoint", str(ckpt)])
    with open(out / "plots" / "features.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0][:3] == ["id", "true_label", "train_label"]
    assert len(rows) == 13

    hist = tmp_path / "hist" / "loss.csv"
    main(["loss-hist", "--config", str(config_path), "--checkpoint", str(ckpt), "--bins", "5",
          "--out", str(hist)])
    assert len(hist.read_text(encoding="utf-8").splitlines()) == 1 + 3 * 5
    with open(hist.with_name("loss_summary.csv"), newline="", encoding="utf-8") as f:
        summary = list(csv.DictReader(f))
    assert [(r["class"], r["group"]) for r in summary][-2:] == [("all", "clean"), ("all", "mislabeled")]
    assert sum(int(r["count"]) for r in summary if r["class"] == "all") == 18
