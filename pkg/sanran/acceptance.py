"""Desk-scale acceptance sweep.

Runs co-training, the cross-entropy baseline and co-training without joint
alignment over every (seed, noise setting) cell of the plan, then checks
the measured numbers against the frozen thresholds of acceptance.yaml:

- memorization: after warm-up, mislabeled samples have the higher mean loss
- division: clean/noisy division quality after the post-warm-up epochs
- robustness: co-training beats the baseline by the margin in every setting
- alignment: dropping joint alignment never helps beyond the tolerance and hurts
  under asymmetric noise
- budget: total wall clock
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from sanran import harness
from sanran.config import ExperimentConfig, find_data_file, replace_section
from sanran.dataset import NoiseSpec, read_manifest
from sanran.errors import ConfigError, DataError
from sanran.report import RunReport

log = logging.getLogger(__name__)

PLAN_NAME = "acceptance.yaml"
RESULT_FILE = "acceptance.yaml"

# variant name -> (baseline, alignment)
VARIANTS = {
    "clsdf": ("clsdf", "joint"),
    "ce": ("ce", "joint"),
    "clsdf-no-align": ("clsdf", "none"),
}


@dataclass(frozen=True)
class Thresholds:
    memorization_gap: float = 0.2
    division_accuracy: float = 0.80
    division_error: float = 0.25
    robustness_margin: float = 0.05
    alignment_tolerance: float = 0.01
    budget_minutes: float = 30.0


@dataclass(frozen=True)
class AcceptancePlan:
    budget: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0, 1, 2)
    settings: tuple[NoiseSpec, ...] = (NoiseSpec("sym", 0.4), NoiseSpec("asym", 0.3))
    division_epochs: int = 10
    thresholds: Thresholds = field(default_factory=Thresholds)

    @classmethod
    def load(cls, path: Path | None = None) -> "AcceptancePlan":
        path = Path(path) if path else find_data_file(PLAN_NAME)
        if path is None or not path.exists():
            raise ConfigError(f"acceptance plan not found: {path or PLAN_NAME}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "AcceptancePlan":
        known = {"budget", "seeds", "settings", "division_epochs", "thresholds"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown acceptance key: {sorted(unknown)[0]}")
        try:
            plan = cls(
                budget=dict(raw.get("budget") or {}),
                seeds=tuple(int(s) for s in raw.get("seeds", (0, 1, 2))),
                settings=tuple(
                    NoiseSpec(s["kind"], float(s["rate"]), _pair_map(s.get("pair_map")))
                    for s in raw.get("settings", [])
                ) or cls.settings,
                division_epochs=int(raw.get("division_epochs", 10)),
                thresholds=Thresholds(**(raw.get("thresholds") or {})),
            )
        except (DataError, KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"acceptance plan: {e}") from e
        if not plan.seeds:
            raise ConfigError("acceptance plan needs at least one seed")
        if plan.division_epochs < 1:
            raise ConfigError("division_epochs must be >= 1")
        return plan

    def cell_config(self, base: ExperimentConfig, seed: int, noise: NoiseSpec) -> ExperimentConfig:
        """Experiment config of one (seed, noise setting) cell under the sweep budget."""
        config = base.with_overrides(seed=seed, **self.budget)
        config = replace_section(
            config, "noise", kind=noise.kind, rate=noise.rate, pair_map=noise.pair_map
        )
        s = config.schedule
        if s.warm_up_epochs < 1:
            raise ConfigError("the acceptance sweep needs at least one warm-up epoch")
        # A checkpoint right after warm-up carries the memorization measurement
        return replace_section(
            config, "schedule",
            total_epochs=max(s.total_epochs, s.warm_up_epochs + self.division_epochs),
            checkpoint_every=s.warm_up_epochs,
        )


@dataclass
class Criterion:
    name: str
    passed: bool
    measured: dict
    threshold: dict


@dataclass
class AcceptanceReport:
    criteria: list[Criterion] = field(default_factory=list)
    runs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "wall_clock": self.wall_clock,
            "criteria": [asdict(c) for c in self.criteria],
            "runs": self.runs,
        }

    def write(self, out: Path) -> Path:
        path = Path(out) / RESULT_FILE
        path.write_text(yaml.safe_dump(_plain(self.to_dict()), sort_keys=False), encoding="utf-8")
        return path


def setting_name(noise: NoiseSpec) -> str:
    return f"{noise.kind}{round(noise.rate * 100):02d}"


def run_sweep(
    base: ExperimentConfig, plan: AcceptancePlan, out: Path | None = None
) -> AcceptanceReport:
    """Run every cell of the plan and evaluate the acceptance criteria."""
    out = Path(out or Path(base.out) / "acceptance")
    out.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    try:
        read_manifest(Path(base.data.root))
    except DataError:
        log.info("no dataset in %s, generating one", base.data.root)
        harness.generate_dataset(base)

    report = AcceptanceReport()
    # results[setting][variant] -> list of RunReport, one per seed
    results: dict[str, dict[str, list[RunReport]]] = {}
    memorization = None
    for noise in plan.settings:
        name = setting_name(noise)
        results[name] = {v: [] for v in VARIANTS}
        for seed in plan.seeds:
            config = plan.cell_config(base, seed, noise)
            harness.ensure_split(config)
            cell_dir = out / name / f"seed-{seed}"
            runs = _run_cell(config, cell_dir)
            for variant, run_report in runs.items():
                results[name][variant].append(run_report)
                report.runs.append({
                    "setting": name, "seed": seed, "variant": variant,
                    "run_dir": str(cell_dir / variant),
                    "final_accuracy": run_report.final_accuracy,
                    "wall_clock": run_report.wall_clock,
                })
            if memorization is None and noise.kind == "sym":
                checkpoint = cell_dir / "clsdf" / "checkpoints" / (
                    f"epoch-{config.schedule.warm_up_epochs:03d}.ckpt"
                )
                _, losses = harness.training_losses(config, checkpoint)
                memorization = losses.mean_gap()

    t = plan.thresholds
    if memorization is not None:
        report.criteria.append(check_memorization(*memorization, t))
    sym = next((setting_name(n) for n in plan.settings if n.kind == "sym"), None)
    if sym is not None:
        warm_up = plan.cell_config(base, plan.seeds[0], plan.settings[0]).schedule.warm_up_epochs
        report.criteria.append(
            check_division(results[sym]["clsdf"], warm_up + plan.division_epochs - 1, t)
        )
    report.criteria.append(check_robustness(results, t))
    report.criteria.append(check_alignment(results, plan.settings, t))
    report.wall_clock = time.monotonic() - started
    minutes = report.wall_clock / 60.0
    report.criteria.append(Criterion(
        "budget", minutes <= t.budget_minutes, {"minutes": minutes},
        {"max_minutes": t.budget_minutes},
    ))
    path = report.write(out)
    log.info("acceptance %s (%d criteria) -> %s",
             "passed" if report.passed else "FAILED", len(report.criteria), path)
    return report


def _run_cell(config: ExperimentConfig, cell_dir: Path) -> dict[str, RunReport]:
    def run(variant: str) -> RunReport:
        baseline, alignment = VARIANTS[variant]
        variant_config = replace_section(config, "ssl", alignment=alignment)
        variant_config = variant_config.with_overrides(
            baseline=baseline, out=str(cell_dir / variant)
        )
        return harness.train(variant_config, cell_dir / variant)

    with ThreadPoolExecutor(max_workers=config.concurrency.max_workers) as pool:
        return dict(zip(VARIANTS, pool.map(run, VARIANTS)))


def check_memorization(clean: float, mislabeled: float, t: Thresholds) -> Criterion:
    gap = mislabeled - clean
    return Criterion(
        "memorization", bool(gap >= t.memorization_gap),
        {"clean_mean": clean, "mislabeled_mean": mislabeled, "gap": gap},
        {"min_gap": t.memorization_gap},
    )


def check_division(reports: list[RunReport], epoch: int, t: Thresholds) -> Criterion:
    """Seed-averaged division quality of both branches at `epoch`."""
    measured = {}
    for branch in ("a", "b"):
        records = [r.epochs[min(epoch, len(r.epochs) - 1)] for r in reports]
        measured[f"accuracy_{branch}"] = float(
            np.mean([getattr(r, f"division_accuracy_{branch}") for r in records])
        )
        measured[f"error_{branch}"] = float(
            np.mean([getattr(r, f"division_error_{branch}") for r in records])
        )
    passed = all(
        measured[f"accuracy_{b}"] >= t.division_accuracy
        and measured[f"error_{b}"] <= t.division_error
        for b in ("a", "b")
    )
    return Criterion(
        "division", passed, measured,
        {"min_accuracy": t.division_accuracy, "max_error": t.division_error},
    )


def check_robustness(results: dict, t: Thresholds) -> Criterion:
    measured = {}
    for name, variants in results.items():
        clsdf = _mean_accuracy(variants["clsdf"])
        ce = _mean_accuracy(variants["ce"])
        measured[name] = {"clsdf": clsdf, "ce": ce, "margin": clsdf - ce}
    passed = all(m["margin"] >= t.robustness_margin for m in measured.values())
    return Criterion("robustness", passed, measured, {"min_margin": t.robustness_margin})


def check_alignment(results: dict, settings, t: Thresholds) -> Criterion:
    measured, passed = {}, True
    for noise in settings:
        variants = results[setting_name(noise)]
        joint = _mean_accuracy(variants["clsdf"])
        none = _mean_accuracy(variants["clsdf-no-align"])
        gain = none - joint
        measured[setting_name(noise)] = {"joint": joint, "none": none, "gain_without": gain}
        passed &= gain <= t.alignment_tolerance
        if noise.kind == "asym":
            passed &= gain < 0
    return Criterion("alignment", bool(passed), measured, {"max_gain": t.alignment_tolerance})


def _mean_accuracy(reports: list[RunReport]) -> float:
    values = [r.final_accuracy for r in reports if not math.isnan(r.final_accuracy)]
    return float(np.mean(values)) if values else math.nan


def _plain(value):
    """Numbers as YAML-native scalars, NaN as null."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (float, np.floating)):
        return None if math.isnan(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def _pair_map(value) -> tuple[int, ...] | None:
    return tuple(int(c) for c in value) if value else None
