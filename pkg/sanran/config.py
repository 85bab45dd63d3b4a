"""Configuration file discovery and the typed experiment configuration.

Search order:
1. Explicitly provided path
2. .sanran/config/ in the current directory
3. ~/.config/sanran/
4. Package-bundled defaults (sanran/_defaults/)

Whatever file is found is merged over the bundled defaults, so partial
files are fine. Unknown keys raise ConfigError with their dotted path.
"""

import shutil
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from sanran.asc_sim import RadarConfig
from sanran.cotrain import METHODS, Schedule
from sanran.dataset import AugmentationSpec, NoiseSpec
from sanran.errors import ConfigError, DataError
from sanran.features import ModelConfig
from sanran.ssl import SslHyper

# Package-bundled default configuration directory
_DEFAULTS_DIR = Path(__file__).resolve().parent / "_defaults"

# User global configuration
_USER_CONFIG_DIR = Path.home() / ".config" / "sanran"

CONFIG_NAME = "sanran.yaml"


def _search_paths() -> list[Path]:
    """List of search paths for configuration files (in priority order)."""
    return [
        Path.cwd() / ".sanran" / "config",
        _USER_CONFIG_DIR,
        _DEFAULTS_DIR,
    ]


def find_config(config_path: Path | None = None) -> Path | None:
    """Find sanran.yaml."""
    if config_path:
        return config_path if config_path.exists() else None
    for base in _search_paths():
        p = base / CONFIG_NAME
        if p.exists():
            return p
    return None


def find_data_file(name: str) -> Path | None:
    """Find a bundled data file such as templates.yaml, honoring local overrides."""
    for base in _search_paths():
        p = base / name
        if p.exists():
            return p
    return None


def load_config(config_path: Path | None = None) -> dict:
    """Load the raw configuration mapping. Returns an empty dict if not found."""
    path = find_config(config_path)
    if not path:
        return {}
    try:
        return yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e


def init_project(target: Path | None = None) -> Path:
    """Copy .sanran/config/ to the current directory (or target) to initialize."""
    dest = (target or Path.cwd()) / ".sanran" / "config"
    if dest.exists():
        raise FileExistsError(f"{dest} already exists. Aborted to avoid overwriting.")
    shutil.copytree(_DEFAULTS_DIR, dest)
    return dest


# --- Typed configuration ---


@dataclass(frozen=True)
class DataConfig:
    root: str = "data/desk"
    num_classes: int = 10
    num_centers: int = 40
    samples_per_class: int = 250
    train_per_class: int = 200
    test_per_class: int = 50
    image_size: int = 96
    snr_db: float | None = None
    templates: str | None = None


@dataclass(frozen=True)
class ConcurrencyConfig:
    max_workers: int = 4


_SECTIONS = {
    "data": DataConfig,
    "radar": RadarConfig,
    "noise": NoiseSpec,
    "augment": AugmentationSpec,
    "model": ModelConfig,
    "ssl": SslHyper,
    "schedule": Schedule,
    "concurrency": ConcurrencyConfig,
}
_SCALARS = {"seed": int, "out": str, "baseline": str, "debug": bool}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    radar: RadarConfig = field(default_factory=RadarConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    ssl: SslHyper = field(default_factory=SslHyper)
    schedule: Schedule = field(default_factory=Schedule)
    concurrency: ConcurrencyConfig = field(default_factory=ConcurrencyConfig)
    seed: int = 0
    out: str = "runs/desk"
    baseline: str = "clsdf"
    debug: bool = False

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration root must be a mapping")
        kwargs = {}
        for key, value in raw.items():
            if key in _SECTIONS:
                kwargs[key] = _build_section(_SECTIONS[key], value, key)
            elif key in _SCALARS:
                kwargs[key] = _coerce(value, _SCALARS[key], key)
            else:
                raise ConfigError(f"unknown config key: {key}")
        config = cls(**kwargs)
        config.validate()
        return config

    def to_dict(self) -> dict:
        d = {name: _section_dict(getattr(self, name)) for name in _SECTIONS}
        d.update(seed=self.seed, out=self.out, baseline=self.baseline, debug=self.debug)
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(_deep_merge(_bundled_defaults(), yaml.safe_load(text) or {}))

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Apply dotted-path overrides, e.g. {"noise.rate": 0.2, "seed": 3}."""
        raw = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = raw
            *path, leaf = dotted.split(".")
            for part in path:
                node = node.get(part) if isinstance(node, dict) else None
                if node is None:
                    raise ConfigError(f"unknown config key: {dotted}")
            if not isinstance(node, dict) or leaf not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node[leaf] = value
        return ExperimentConfig.from_dict(raw)

    def validate(self) -> None:
        """Cross-section consistency checks."""
        d, s = self.data, self.schedule
        if self.baseline not in METHODS:
            raise ConfigError(f"baseline must be one of {METHODS}, got {self.baseline!r}")
        if d.num_classes < 2:
            raise ConfigError("data.num_classes must be >= 2")
        if d.train_per_class + d.test_per_class > d.samples_per_class:
            raise ConfigError(
                "data.train_per_class + data.test_per_class exceeds data.samples_per_class"
            )
        if d.train_per_class < 1 or d.test_per_class < 1:
            raise ConfigError("data.train_per_class and data.test_per_class must be >= 1")
        if not 1 <= self.model.k < d.num_centers:
            raise ConfigError(f"model.k must satisfy 1 <= k < data.num_centers ({d.num_centers})")
        if self.augment.region > d.image_size:
            raise ConfigError(
                f"augment.region {self.augment.region} exceeds data.image_size {d.image_size}"
            )
        if self.baseline == "clsdf" and s.warm_up_epochs >= s.total_epochs:
            raise ConfigError("schedule.warm_up_epochs must be smaller than schedule.total_epochs")
        if self.noise.kind == "asym":
            try:
                self.noise.resolved_pair_map(d.num_classes)
            except DataError as e:
                raise ConfigError(f"noise.pair_map: {e}") from e


def _coerce(value, kind, path: str):
    if kind is float and isinstance(value, (int, str)) and not isinstance(value, bool):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if kind is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(f"{path}: expected true or false, got {value!r}")
    if kind in (int, str) and not isinstance(value, kind):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {value!r}")
    return value


def _build_section(cls, data, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {path}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        elif value is not None:
            value = _coerce(value, known[key].type, f"{path}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (DataError, TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _section_dict(section) -> dict:
    out = {}
    for f in fields(section):
        value = getattr(section, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _bundled_defaults() -> dict:
    return load_config(_DEFAULTS_DIR / CONFIG_NAME)


def load_experiment(config_path: Path | None = None, **overrides) -> ExperimentConfig:
    """Resolve, merge over defaults, apply dotted overrides and validate."""
    if config_path is not None and not Path(config_path).exists():
        raise ConfigError(f"config file not found: {config_path}")
    raw = _deep_merge(_bundled_defaults(), load_config(Path(config_path) if config_path else None))
    config = ExperimentConfig.from_dict(raw)
    return config.with_overrides(**overrides) if overrides else config


def replace_section(config: ExperimentConfig, section: str, **changes) -> ExperimentConfig:
    """Copy of config with fields of one section replaced, re-validated."""
    updated = replace(config, **{section: replace(getattr(config, section), **changes)})
    updated.validate()
    return updated
