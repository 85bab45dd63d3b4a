"""Sample records, train/test split, label corruption, augmentation and storage."""

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from sanran.asc_sim import NUM_ASC_PARAMS, AmplitudeImage, AscSet
from sanran.errors import DataError, DomainError, ShapeError

log = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.yaml"
RECORDS_FILE = "samples.bin"
AUDIT_FILE = "audit.csv"
TEST_FILE = "test.csv"

NOISE_KINDS = ("sym", "asym")


@dataclass
class SarSample:
    id: int
    asc: AscSet
    image: AmplitudeImage
    true_label: int
    train_label: int

    @property
    def is_corrupted(self) -> bool:
        return self.true_label != self.train_label


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "sym"
    rate: float = 0.0
    pair_map: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise DomainError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise DomainError(f"noise rate must lie in [0, 1), got {self.rate}")
        if self.kind == "asym" and self.rate >= 0.5:
            raise DomainError(f"asymmetric noise rate must be < 0.5, got {self.rate}")

    def resolved_pair_map(self, num_classes: int) -> tuple[int, ...]:
        """Explicit pair map, or the cyclic default c -> c-1."""
        if self.pair_map is None:
            return tuple((c - 1) % num_classes for c in range(num_classes))
        pair_map = tuple(int(c) for c in self.pair_map)
        if len(pair_map) != num_classes or not all(0 <= c < num_classes for c in pair_map):
            raise DomainError(f"pair_map must map each of {num_classes} classes into range")
        if all(c == i for i, c in enumerate(pair_map)):
            raise DomainError("pair_map is the identity; asymmetric noise would change nothing")
        return pair_map

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "rate": self.rate}
        if self.pair_map is not None:
            d["pair_map"] = list(self.pair_map)
        return d


@dataclass(frozen=True)
class AugmentationSpec:
    crop_size: int = 64
    region: int = 96
    contrast: tuple[float, float] = (0.8, 1.2)
    brightness: tuple[float, float] = (-0.1, 0.1)
    clamp_max: float = 1.5
    random_crop: bool = True

    def __post_init__(self) -> None:
        if self.crop_size > self.region:
            raise DomainError(f"crop_size {self.crop_size} exceeds region {self.region}")
        if self.contrast[0] > self.contrast[1] or self.brightness[0] > self.brightness[1]:
            raise DomainError("jitter ranges must be (low, high)")


# --- Sample bank ---


@dataclass
class SampleBank:
    """Column view of a sample list, the form the networks consume."""

    ids: np.ndarray  # (N,) int64
    asc: np.ndarray  # (N, P, 7) float32
    images: np.ndarray  # (N, H, W) float32
    true_labels: np.ndarray  # (N,) int64
    train_labels: np.ndarray  # (N,) int64
    _index: dict = field(default=None, repr=False, compare=False)

    @classmethod
    def from_samples(cls, samples: list[SarSample]) -> "SampleBank":
        if not samples:
            raise DataError("cannot build a sample bank from zero samples")
        return cls(
            ids=np.array([s.id for s in samples], dtype=np.int64),
            asc=np.stack([s.asc.as_table() for s in samples]).astype(np.float32),
            images=np.stack([s.image.values for s in samples]).astype(np.float32),
            true_labels=np.array([s.true_label for s in samples], dtype=np.int64),
            train_labels=np.array([s.train_label for s in samples], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.ids)

    def positions(self, ids) -> np.ndarray:
        """Row positions of the given sample ids."""
        if self._index is None:
            self._index = {int(i): p for p, i in enumerate(self.ids)}
        try:
            return np.array([self._index[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"sample id {exc.args[0]} is not in this bank") from exc

    def subset(self, positions) -> "SampleBank":
        positions = np.asarray(positions, dtype=np.int64)
        return SampleBank(
            self.ids[positions], self.asc[positions], self.images[positions],
            self.true_labels[positions], self.train_labels[positions],
        )

    def with_asc(self, asc: np.ndarray) -> "SampleBank":
        if asc.shape != self.asc.shape:
            raise ShapeError(f"ASC array shape {asc.shape} != {self.asc.shape}")
        return replace(self, asc=asc, _index=self._index)

    def center_crops(self, size: int) -> np.ndarray:
        return center_crop(self.images, size)


@dataclass(frozen=True)
class NoiseAudit:
    """Ground truth for the training split: which labels were corrupted."""

    ids: np.ndarray
    true_labels: np.ndarray
    train_labels: np.ndarray

    @property
    def corrupted(self) -> np.ndarray:
        return self.true_labels != self.train_labels

    @property
    def noise_fraction(self) -> float:
        return float(self.corrupted.mean()) if len(self.ids) else 0.0

    def is_correct(self, ids) -> np.ndarray:
        lookup = dict(zip(self.ids.tolist(), (~self.corrupted).tolist()))
        return np.array([lookup[int(i)] for i in ids], dtype=bool)

    @classmethod
    def from_samples(cls, samples: list[SarSample]) -> "NoiseAudit":
        return cls(
            np.array([s.id for s in samples], dtype=np.int64),
            np.array([s.true_label for s in samples], dtype=np.int64),
            np.array([s.train_label for s in samples], dtype=np.int64),
        )


# --- Split and label corruption ---


def split(
    samples: list[SarSample], train_per_class: int, test_per_class: int, seed: int
) -> tuple[list[SarSample], list[SarSample]]:
    """Per-class random split by true label. Both halves are returned in id order."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[SarSample]] = {}
    for s in samples:
        by_class.setdefault(s.true_label, []).append(s)
    train, test = [], []
    for label in sorted(by_class):
        members = by_class[label]
        needed = train_per_class + test_per_class
        if len(members) < needed:
            raise DataError(f"class {label} has {len(members)} samples, need {needed}")
        order = rng.permutation(len(members))
        train += [members[i] for i in order[:train_per_class]]
        test += [members[i] for i in order[train_per_class:needed]]
    return sorted(train, key=lambda s: s.id), sorted(test, key=lambda s: s.id)


def inject_noise(
    samples: list[SarSample], spec: NoiseSpec, seed: int, num_classes: int | None = None
) -> list[SarSample]:
    """Corrupt exactly round(rate * N) training labels. true_label is never touched."""
    if any(s.is_corrupted for s in samples):
        raise DataError("inject_noise expects clean labels; this set was already corrupted")
    n = len(samples)
    num_classes = num_classes or (max(s.true_label for s in samples) + 1 if samples else 0)
    n_noisy = int(round(spec.rate * n))
    if n_noisy == 0:
        return [replace(s) for s in samples]
    if num_classes < 2:
        raise DomainError("label noise needs at least two classes")

    rng = np.random.default_rng(seed)
    new_labels = {}
    if spec.kind == "sym":
        for pos in rng.choice(n, size=n_noisy, replace=False):
            true = samples[pos].true_label
            other = int(rng.integers(num_classes - 1))
            new_labels[int(pos)] = other + 1 if other >= true else other
    else:
        pair_map = spec.resolved_pair_map(num_classes)
        eligible = np.array([i for i, s in enumerate(samples) if pair_map[s.true_label] != s.true_label])
        if len(eligible) < n_noisy:
            raise DataError(f"only {len(eligible)} samples can be flipped, need {n_noisy}")
        for pos in rng.choice(eligible, size=n_noisy, replace=False):
            new_labels[int(pos)] = pair_map[samples[pos].true_label]

    out = [replace(s, train_label=new_labels.get(i, s.true_label)) for i, s in enumerate(samples)]
    log.info("corrupted %d of %d labels (%s, rate %.2f)", n_noisy, n, spec.kind, spec.rate)
    return out


# --- Augmentation ---


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    """Center size x size window over the last two axes."""
    h, w = image.shape[-2:]
    if size > h or size > w:
        raise ShapeError(f"crop {size} larger than image {h}x{w}")
    r0, c0 = (h - size) // 2, (w - size) // 2
    return image[..., r0 : r0 + size, c0 : c0 + size]


def augment(image: np.ndarray, spec: AugmentationSpec, seed) -> np.ndarray:
    """Random crop within the central region, then contrast/brightness jitter and clamp."""
    rng = _as_rng(seed)
    h, w = image.shape[-2:]
    if h < spec.region or w < spec.region:
        raise DataError(f"image {h}x{w} is smaller than the crop region {spec.region}")
    region = center_crop(image, spec.region)
    span = spec.region - spec.crop_size
    if spec.random_crop:
        dy, dx = int(rng.integers(span + 1)), int(rng.integers(span + 1))
    else:
        dy = dx = span // 2
    crop = region[..., dy : dy + spec.crop_size, dx : dx + spec.crop_size]
    contrast = rng.uniform(*spec.contrast)
    brightness = rng.uniform(*spec.brightness)
    return np.clip(crop * contrast + brightness, 0.0, spec.clamp_max).astype(image.dtype)


def augment_batch(
    images: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator
) -> np.ndarray:
    return np.stack([augment(img, spec, rng) for img in images])


# --- Storage ---


def _record_dtype(num_centers: int, height: int, width: int) -> np.dtype:
    return np.dtype(
        [
            ("asc", "<f4", (num_centers, NUM_ASC_PARAMS)),
            ("image", "<f4", (height, width)),
            ("label", "<i4"),
        ]
    )


def write_dataset(root: Path, samples: list[SarSample], manifest: dict) -> Path:
    """Write manifest.yaml and the fixed-size binary records. Record index == sample id."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if [s.id for s in samples] != list(range(len(samples))):
        raise DataError("sample ids must be 0..N-1 in order to be stored")
    num_centers = len(samples[0].asc)
    height, width = samples[0].image.shape
    records = np.zeros(len(samples), dtype=_record_dtype(num_centers, height, width))
    for i, s in enumerate(samples):
        records[i]["asc"] = s.asc.as_table()
        records[i]["image"] = s.image.values
        records[i]["label"] = s.true_label
    records.tofile(root / RECORDS_FILE)

    manifest = dict(manifest)
    manifest.update(num_samples=len(samples), num_centers=num_centers, height=height, width=width)
    (root / MANIFEST_FILE).write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    log.info("wrote %d samples to %s", len(samples), root)
    return root


def read_manifest(root: Path) -> dict:
    path = Path(root) / MANIFEST_FILE
    if not path.exists():
        raise DataError(f"dataset manifest not found: {path} (run gen-data first)")
    return yaml.safe_load(path.read_text(encoding="utf-8")) or {}


def read_dataset(root: Path) -> tuple[list[SarSample], dict]:
    root = Path(root)
    manifest = read_manifest(root)
    try:
        dtype = _record_dtype(manifest["num_centers"], manifest["height"], manifest["width"])
    except KeyError as exc:
        raise DataError(f"manifest is missing {exc.args[0]!r}") from exc
    path = root / RECORDS_FILE
    if not path.exists():
        raise DataError(f"dataset records not found: {path}")
    size = path.stat().st_size
    if size % dtype.itemsize or size // dtype.itemsize != manifest.get("num_samples"):
        raise DataError(f"{path} is truncated or does not match the manifest")
    records = np.fromfile(path, dtype=dtype)
    samples = []
    for i, rec in enumerate(records):
        label = int(rec["label"])
        asc = AscSet.from_table(rec["asc"].astype(np.float64), label)
        samples.append(SarSample(i, asc, AmplitudeImage(rec["image"].copy()), label, label))
    return samples, manifest


def write_audit(path: Path, samples: list[SarSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "true_label", "train_label"])
        for s in samples:
            writer.writerow([s.id, s.true_label, s.train_label])


def write_test_ids(path: Path, samples: list[SarSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "true_label"])
        for s in samples:
            writer.writerow([s.id, s.true_label])


def _read_csv(path: Path, columns: list[str]) -> list[list[int]]:
    if not path.exists():
        raise DataError(f"{path.name} not found in {path.parent} (run inject-noise first)")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != columns:
            raise DataError(f"{path} has columns {reader.fieldnames}, expected {columns}")
        return [[int(row[c]) for c in columns] for row in reader]


def read_audit(root: Path) -> NoiseAudit:
    rows = _read_csv(Path(root) / AUDIT_FILE, ["id", "true_label", "train_label"])
    rows = np.array(rows, dtype=np.int64)
    return NoiseAudit(rows[:, 0], rows[:, 1], rows[:, 2])


def load_split(root: Path) -> tuple[list[SarSample], list[SarSample], NoiseAudit]:
    """Training samples carrying their corrupted labels, test samples, and the audit."""
    samples, _ = read_dataset(root)
    audit = read_audit(root)
    test_rows = _read_csv(Path(root) / TEST_FILE, ["id", "true_label"])
    by_id = {s.id: s for s in samples}
    try:
        train = [
            replace(by_id[int(i)], train_label=int(t))
            for i, t in zip(audit.ids, audit.train_labels)
        ]
        test = [by_id[i] for i, _ in test_rows]
    except KeyError as exc:
        raise DataError(f"split references unknown sample id {exc.args[0]}") from exc
    for s, true in zip(train, audit.true_labels):
        if s.true_label != true:
            raise DataError(f"audit true label for sample {s.id} disagrees with the records")
    check_disjoint(train, test)
    return train, test, audit


def check_disjoint(train: list[SarSample], test: list[SarSample]) -> None:
    overlap = {s.id for s in train} & {s.id for s in test}
    if overlap:
        raise DataError(f"{len(overlap)} sample ids appear in both train and test")
