"""End-to-end operations behind the CLI subcommands."""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from sanran import cotrain
from sanran.asc_sim import generate_class_sample, load_templates
from sanran.autodiff import debug_mode, no_grad
from sanran.checkpoint import load_checkpoint
from sanran.config import ExperimentConfig, find_data_file
from sanran.dataset import (
    AUDIT_FILE,
    TEST_FILE,
    NoiseAudit,
    SampleBank,
    check_disjoint,
    inject_noise,
    load_split,
    read_dataset,
    read_manifest,
    split,
    write_audit,
    write_dataset,
    write_test_ids,
)
from sanran.divide import per_sample_losses
from sanran.errors import ConfigError, DataError
from sanran.features import AscScaler
from sanran.report import RunReport, format_value
from sanran.ssl import StepSettings, warm_up

log = logging.getLogger(__name__)

SPLIT_MARKER = "split.yaml"


def sample_seed(seed: int, class_id: int, index: int) -> int:
    """Per-sample seed, stable under any generation order."""
    return int(np.random.SeedSequence([seed, class_id, index]).generate_state(1)[0])


def generate_dataset(config: ExperimentConfig, root: Path | None = None) -> Path:
    """Synthesize samples_per_class targets of every class and store them."""
    d = config.data
    root = Path(root or d.root)
    template_path = Path(d.templates) if d.templates else find_data_file("templates.yaml")
    templates = load_templates(d.num_centers, template_path)
    if len(templates) < d.num_classes:
        raise DataError(f"templates define {len(templates)} classes, need {d.num_classes}")

    jobs = [(c, k) for c in range(d.num_classes) for k in range(d.samples_per_class)]

    def make(job):
        c, k = job
        return generate_class_sample(
            c, sample_seed(config.seed, c, k), config.radar, templates,
            image_size=d.image_size, snr_db=d.snr_db, sample_id=c * d.samples_per_class + k,
        )

    with ThreadPoolExecutor(max_workers=config.concurrency.max_workers) as pool:
        samples = list(pool.map(make, jobs))
    for s in samples:
        s.asc.validate(d.num_centers, d.num_classes)

    manifest = {
        "num_classes": d.num_classes,
        "samples_per_class": d.samples_per_class,
        "seed": config.seed,
        "snr_db": d.snr_db,
        "class_names": [t.name for t in templates[: d.num_classes]],
        "radar": config.radar.to_dict(),
    }
    return write_dataset(root, samples, manifest)


def make_noisy_split(config: ExperimentConfig, root: Path | None = None) -> NoiseAudit:
    """Split into train/test, corrupt training labels, write audit.csv and test.csv."""
    d = config.data
    root = Path(root or d.root)
    samples, manifest = read_dataset(root)
    train, test = split(samples, d.train_per_class, d.test_per_class, config.seed)
    check_disjoint(train, test)
    noisy = inject_noise(train, config.noise, config.seed + 1, d.num_classes)
    write_audit(root / AUDIT_FILE, noisy)
    write_test_ids(root / TEST_FILE, test)
    marker = split_marker(config, manifest)
    (root / SPLIT_MARKER).write_text(yaml.safe_dump(marker, sort_keys=False), encoding="utf-8")
    return NoiseAudit.from_samples(noisy)


def split_marker(config: ExperimentConfig, manifest: dict) -> dict:
    """Everything the split files depend on: noise, seed, split sizes and the dataset itself."""
    d = config.data
    return {
        **config.noise.to_dict(),
        "seed": config.seed,
        "num_classes": d.num_classes,
        "samples_per_class": d.samples_per_class,
        "train_per_class": d.train_per_class,
        "test_per_class": d.test_per_class,
        "dataset": {"seed": manifest.get("seed"), "num_samples": manifest.get("num_samples")},
    }


def load_banks(
    config: ExperimentConfig, root: Path | None = None
) -> tuple[SampleBank, SampleBank, NoiseAudit]:
    train, test, audit = load_split(Path(root or config.data.root))
    return SampleBank.from_samples(train), SampleBank.from_samples(test), audit


def ensure_split(config: ExperimentConfig, root: Path | None = None) -> None:
    """Re-derive the noisy split when it is missing or was made from other settings or data."""
    root = Path(root or config.data.root)
    marker = root / SPLIT_MARKER
    wanted = split_marker(config, read_manifest(root))
    current = yaml.safe_load(marker.read_text(encoding="utf-8")) if marker.exists() else None
    if current != wanted or not (root / AUDIT_FILE).exists():
        log.info("noisy split missing or stale in %s, regenerating", root)
        make_noisy_split(config, root)


def train(config: ExperimentConfig, run_dir: Path | None = None) -> RunReport:
    run_dir = Path(run_dir or config.out)
    ensure_split(config)
    train_bank, test_bank, audit = load_banks(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config.to_yaml(), encoding="utf-8")
    log.info("training %s on %d samples (noise %s %.2f) -> %s",
             config.baseline, len(train_bank), config.noise.kind, config.noise.rate, run_dir)
    with debug_mode(config.debug):
        return cotrain.run(config, train_bank, test_bank, audit, run_dir)


def load_trained(checkpoint: Path):
    """(config, nets, scaler) from a checkpoint written during training."""
    tensors, meta = load_checkpoint(checkpoint)
    config = ExperimentConfig.from_yaml(meta)
    nets, scaler = cotrain.load_branches(tensors, config)
    return config, nets, scaler


def evaluate_checkpoint(checkpoint: Path, data_root: Path | None = None) -> cotrain.Evaluation:
    config, nets, scaler = load_trained(checkpoint)
    _, test_bank, _ = load_banks(config, data_root)
    return cotrain.evaluate(
        nets, _scaled(test_bank, scaler), config.augment.crop_size, config.schedule.eval_batch_size
    )


def export_plots(
    run_dir: Path, checkpoint: Path | None = None, data_root: Path | None = None
) -> list[Path]:
    """Plot-ready CSV series, one file per curve group.

    With a checkpoint the fused test embeddings are written as well.
    """
    run_dir = Path(run_dir)
    report = RunReport.load(run_dir)
    out_dir = run_dir / "plots"
    out_dir.mkdir(exist_ok=True)
    groups = {
        "accuracy": ["test_accuracy", "accuracy_a", "accuracy_b"],
        "losses": ["ce_a", "ce_b", "mse_a", "mse_b", "lambda_u"],
        "division": ["division_accuracy_a", "division_error_a", "division_accuracy_b", "division_error_b"],
        "subsets": ["clean_a", "noisy_a", "clean_b", "noisy_b"],
    }
    written = []
    for name, columns in groups.items():
        path = out_dir / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", *columns])
            for record in report.epochs:
                writer.writerow([record.epoch, *(format_value(getattr(record, c)) for c in columns)])
        written.append(path)
    if checkpoint:
        written.append(export_features(Path(checkpoint), out_dir / "features.csv", data_root))
    return written


def export_features(checkpoint: Path, path: Path, data_root: Path | None = None) -> Path:
    """Fused embeddings of branch A per test sample (id, true_label, train_label, f0..fn)."""
    config, nets, scaler = load_trained(checkpoint)
    _, test_bank, _ = load_banks(config, data_root)
    net = nets[0].eval()
    images = test_bank.center_crops(config.augment.crop_size)
    asc = scaler.transform(test_bank.asc)
    rows = []
    with no_grad():
        for start in range(0, len(test_bank), config.schedule.eval_batch_size):
            stop = start + config.schedule.eval_batch_size
            rows.append(net.embed(images[start:stop], asc[start:stop]).data)
    embeddings = np.concatenate(rows)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        header = ["id", "true_label", "train_label"]
        writer.writerow([*header, *(f"f{i}" for i in range(embeddings.shape[1]))])
        labels = zip(test_bank.ids, test_bank.true_labels, test_bank.train_labels)
        for (i, true, train), vec in zip(labels, embeddings):
            writer.writerow([int(i), int(true), int(train), *(repr(float(v)) for v in vec)])
    return path


@dataclass
class TrainingLosses:
    """Class-wise normalized training losses with the audit's verdict per sample."""

    losses: np.ndarray
    labels: np.ndarray  # training labels
    correct: np.ndarray  # label equals the true label
    num_classes: int

    def groups(self):
        """(class, clean mask, mislabeled mask) per class, then the whole set as "all"."""
        classes = [(c, self.labels == c) for c in range(self.num_classes)]
        for name, members in [*classes, ("all", np.ones(len(self.losses), dtype=bool))]:
            yield name, members & self.correct, members & ~self.correct

    def summary(self) -> list[dict]:
        rows = []
        for name, clean, noisy in self.groups():
            for group, mask in (("clean", clean), ("mislabeled", noisy)):
                mean = float(self.losses[mask].mean()) if mask.any() else float("nan")
                rows.append(
                    {"class": name, "group": group, "count": int(mask.sum()),
                     "mean_normalized_loss": mean}
                )
        return rows

    def mean_gap(self) -> tuple[float, float]:
        """(clean mean, mislabeled mean) over the whole training set."""
        by_group = {r["group"]: r["mean_normalized_loss"] for r in self.summary()
                    if r["class"] == "all"}
        return by_group["clean"], by_group["mislabeled"]


def training_losses(
    config: ExperimentConfig, checkpoint: Path | None = None
) -> tuple[ExperimentConfig, TrainingLosses]:
    """Per-sample losses of branch A of the checkpoint, or of a freshly warmed-up branch."""
    train_bank, _, audit = load_banks(config)
    if checkpoint:
        config, nets, scaler = load_trained(checkpoint)
        net = nets[0]
    else:
        scaler = AscScaler.fit(train_bank.asc)
        branch = cotrain.build_branch(
            "A", config.schedule.branch_seeds[0], config.model, config.data.num_classes,
            config.augment.crop_size, config.ssl,
        )
        net = branch.net
    bank = _scaled(train_bank, scaler)
    if not checkpoint:
        with debug_mode(config.debug):
            warm_up(branch, bank, _warm_up_settings(config), config.schedule.warm_up_epochs)
    ledger = per_sample_losses(net, bank, config.augment.crop_size, config.schedule.eval_batch_size)
    return config, TrainingLosses(
        ledger.normalized(class_wise=True), ledger.labels, audit.is_correct(ledger.ids),
        config.data.num_classes,
    )


def loss_histograms(
    config: ExperimentConfig, checkpoint: Path | None = None, bins: int = 20, out: Path | None = None
) -> Path:
    """Per-class histograms of normalized training losses, clean vs mislabeled labels.

    Uses branch A of the checkpoint, or a freshly warmed-up branch when none is given.
    A summary of the mean normalized loss per group goes next to the histogram file
    as <name>_summary.csv.
    """
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    out = Path(out or Path(config.out) / "loss_hist.csv")
    config, result = training_losses(config, checkpoint)
    edges = np.linspace(0.0, 1.0, bins + 1)

    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "bin_low", "bin_high", "clean_count", "mislabeled_count"])
        for name, clean, noisy in result.groups():
            if name == "all":
                continue
            clean_counts, _ = np.histogram(result.losses[clean], edges)
            noisy_counts, _ = np.histogram(result.losses[noisy], edges)
            for lo, hi, nc, nn in zip(edges[:-1], edges[1:], clean_counts, noisy_counts):
                writer.writerow([name, repr(float(lo)), repr(float(hi)), int(nc), int(nn)])

    summary = out.with_name(f"{out.stem}_summary.csv")
    columns = ["class", "group", "count", "mean_normalized_loss"]
    with open(summary, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in result.summary():
            writer.writerow([format_value(row[c]) for c in columns])
    log.info("loss histograms written to %s (summary %s)", out, summary.name)
    return out


def _warm_up_settings(config: ExperimentConfig) -> StepSettings:
    s = config.schedule
    crop = config.augment.crop_size
    return StepSettings(s.lr, s.momentum, s.weight_decay, s.batch_size, crop, config.augment)


def _scaled(bank: SampleBank, scaler: AscScaler) -> SampleBank:
    return bank.with_asc(scaler.transform(bank.asc))
