import pytest

from sanran.config import ExperimentConfig, init_project, load_experiment, replace_section
from sanran.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "sanran.yaml"
    path.write_text(text, encoding="utf-8")
    return path


def test_bundled_defaults():
    config = load_experiment()
    assert config.data.num_classes == 10
    assert config.data.num_centers == 40
    assert config.radar.center_frequency == 9.6e9
    assert config.radar.n_freq == 128
    assert config.model.image_channels == (16, 32, 64, 128)
    assert config.model.k == 8
    assert config.ssl.delta == 0.6
    assert config.ssl.temperature == 0.5
    assert config.schedule.lr == 0.02
    assert config.schedule.weight_decay == pytest.approx(5e-4)
    assert config.schedule.branch_seeds == (1, 2)


def test_partial_file_merges_over_defaults(tmp_path):
    config = load_experiment(write(tmp_path, "noise:\n  rate: 0.2\nseed: 5\n"))
    assert config.noise.rate == 0.2
    assert config.noise.kind == "sym"
    assert config.seed == 5
    assert config.data.train_per_class == 200


def test_unknown_key_reports_dotted_path(tmp_path):
    with pytest.raises(ConfigError, match="noise.ratio"):
        load_experiment(write(tmp_path, "noise:\n  ratio: 0.2\n"))
    with pytest.raises(ConfigError, match="unknown config key: epochs"):
        load_experiment(write(tmp_path, "epochs: 3\n"))


def test_missing_explicit_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_experiment(tmp_path / "absent.yaml")


def test_unparseable_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot parse"):
        load_experiment(write(tmp_path, "noise: [unclosed\n"))


def test_debug_switch_from_file(tmp_path):
    assert load_experiment().debug is False
    config = load_experiment(write(tmp_path, "debug: true\n"))
    assert config.debug is True
    assert config.to_dict()["debug"] is True
    assert load_experiment(write(tmp_path, "seed: 1\n"), debug=True).debug is True
    with pytest.raises(ConfigError, match="debug"):
        load_experiment(write(tmp_path, "debug: 1\n"))


def test_dotted_overrides():
    config = load_experiment(**{"noise.kind": "asym", "noise.rate": 0.3, "schedule.total_epochs": 8})
    assert (config.noise.kind, config.noise.rate) == ("asym", 0.3)
    assert config.schedule.total_epochs == 8
    # None means "flag not given"
    assert load_experiment(**{"seed": None}).seed == 0
    with pytest.raises(ConfigError):
        load_experiment(**{"noise.colour": "pink"})
    with pytest.raises(ConfigError):
        load_experiment(**{"nothing.here": 1})


@pytest.mark.parametrize(
    "text,needle",
    [
        ("noise:\n  rate: 1.0\n", "noise"),
        ("noise:\n  kind: asym\n  rate: 0.6\n", "noise"),
        ("noise:\n  kind: asym\n  rate: 0.2\n  pair_map: [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]\n", "pair_map"),
        ("data:\n  train_per_class: 240\n", "samples_per_class"),
        ("model:\n  k: 40\n", "model.k"),
        ("schedule:\n  warm_up_epochs: 60\n", "warm_up_epochs"),
        ("baseline: mixmatch\n", "baseline"),
        ("radar:\n  n_freq: 100\n", "radar"),
        ("augment:\n  region: 128\n", "augment.region"),
        ("seed: many\n", "seed"),
    ],
)
def test_invalid_values_are_config_errors(tmp_path, text, needle):
    with pytest.raises(ConfigError, match=needle):
        load_experiment(write(tmp_path, text))


def test_yaml_round_trip_is_stable():
    config = load_experiment(**{"noise.rate": 0.25, "seed": 9})
    again = ExperimentConfig.from_yaml(config.to_yaml())
    assert again == config
    assert again.to_yaml() == config.to_yaml()


def test_replace_section_revalidates():
    config = load_experiment()
    assert replace_section(config, "ssl", alignment="none").ssl.alignment == "none"
    with pytest.raises(ConfigError):
        replace_section(config, "schedule", warm_up_epochs=100)


def test_init_project(tmp_path):
    dest = init_project(tmp_path)
    assert (dest / "sanran.yaml").exists()
    assert (dest / "templates.yaml").exists()
    with pytest.raises(FileExistsError):
        init_project(tmp_path)
