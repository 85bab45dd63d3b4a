"""Forward synthesis of attributed scattering centers (ASC).

Each target is a fixed-size set of parametric scatterers. Their summed
frequency/aspect response is windowed and inverse transformed into an
amplitude image, giving every sample a paired (graph, grid) view.
"""

import cmath
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from sanran.errors import ConfigError, DomainError, NumericError, ShapeError

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 2.99792458e8
ASC_COLUMNS = ("A", "x", "y", "alpha", "L", "phi_bar", "gamma")
NUM_ASC_PARAMS = len(ASC_COLUMNS)

# exp() overflows float64 just above 709
_MAX_EXPONENT = 700.0


def _wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class ScatteringCenter:
    amplitude: float
    x: float
    y: float
    alpha: float = 0.0
    length: float = 0.0
    phi_bar: float = 0.0
    gamma: float = 0.0

    def __post_init__(self) -> None:
        if self.amplitude < 0:
            raise DomainError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.length < 0:
            raise DomainError(f"length must be >= 0, got {self.length}")
        if not -1.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in [-1, 1], got {self.alpha}")
        if not -math.pi <= self.phi_bar < math.pi:
            raise DomainError(f"phi_bar must lie in [-pi, pi), got {self.phi_bar}")
        if abs(self.gamma) > 0.1:
            raise DomainError(f"|gamma| must be <= 0.1, got {self.gamma}")

    def to_row(self) -> tuple[float, ...]:
        return (self.amplitude, self.x, self.y, self.alpha, self.length, self.phi_bar, self.gamma)

    @classmethod
    def from_row(cls, row) -> "ScatteringCenter":
        a, x, y, alpha, length, phi_bar, gamma = (float(v) for v in row)
        return cls(a, x, y, alpha, length, phi_bar, gamma)


@dataclass(frozen=True)
class AscSet:
    centers: tuple[ScatteringCenter, ...]
    class_id: int

    def __len__(self) -> int:
        return len(self.centers)

    def as_table(self) -> np.ndarray:
        """(P, 7) float64 table in ASC_COLUMNS order."""
        if not self.centers:
            return np.zeros((0, NUM_ASC_PARAMS))
        return np.array([c.to_row() for c in self.centers], dtype=np.float64)

    @classmethod
    def from_table(cls, table: np.ndarray, class_id: int) -> "AscSet":
        table = np.asarray(table)
        if table.ndim != 2 or table.shape[1] != NUM_ASC_PARAMS:
            raise ShapeError(f"ASC table must be (P, {NUM_ASC_PARAMS}), got {table.shape}")
        return cls(tuple(ScatteringCenter.from_row(r) for r in table), int(class_id))

    def concat(self, other: "AscSet") -> "AscSet":
        return AscSet(self.centers + other.centers, self.class_id)

    def validate(self, num_centers: int, num_classes: int) -> None:
        """Check the dataset-level invariants: exactly P centers, distinct positions."""
        if len(self.centers) != num_centers:
            raise ShapeError(f"expected {num_centers} centers, got {len(self.centers)}")
        if not 0 <= self.class_id < num_classes:
            raise DomainError(f"class_id {self.class_id} outside [0, {num_classes})")
        positions = {(c.x, c.y) for c in self.centers}
        if len(positions) != len(self.centers):
            raise DomainError("scattering centers must have distinct positions")


@dataclass(frozen=True)
class RadarConfig:
    center_frequency: float = 9.6e9
    bandwidth: float = 0.591e9
    aspect_center: float = 0.0
    aspect_span: float = math.radians(3.0)
    n_freq: int = 128
    n_aspect: int = 128
    propagation_speed: float = SPEED_OF_LIGHT

    def __post_init__(self) -> None:
        if not self.center_frequency > self.bandwidth / 2 > 0:
            raise DomainError("radar config requires f_c > B/2 > 0")
        for name in ("n_freq", "n_aspect"):
            n = getattr(self, name)
            if n < 8 or n & (n - 1):
                raise DomainError(f"{name} must be a power of two >= 8, got {n}")
        if self.aspect_span <= 0:
            raise DomainError("aspect_span must be positive")
        if self.propagation_speed != SPEED_OF_LIGHT:
            raise DomainError("propagation_speed is fixed at 2.99792458e8 m/s")

    def frequencies(self) -> np.ndarray:
        k = np.arange(self.n_freq)
        return self.center_frequency - self.bandwidth / 2 + k * self.bandwidth / self.n_freq

    def aspects(self) -> np.ndarray:
        m = np.arange(self.n_aspect)
        return self.aspect_center - self.aspect_span / 2 + m * self.aspect_span / self.n_aspect

    def pixel_spacing(self, rows: int, cols: int) -> tuple[float, float]:
        """Meters per pixel along (x, y) for a transform of size rows x cols."""
        c = self.propagation_speed
        dx = c / (2 * self.bandwidth) * self.n_freq / rows
        dy = c / (2 * self.center_frequency * self.aspect_span) * self.n_aspect / cols
        return dx, dy

    def to_dict(self) -> dict:
        return {
            "center_frequency": self.center_frequency,
            "bandwidth": self.bandwidth,
            "aspect_center": self.aspect_center,
            "aspect_span": self.aspect_span,
            "n_freq": self.n_freq,
            "n_aspect": self.n_aspect,
            "propagation_speed": self.propagation_speed,
        }


@dataclass(frozen=True)
class FieldGrid:
    values: np.ndarray  # complex, n_freq x n_aspect

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise NumericError("field grid contains non-finite values")


@dataclass(frozen=True)
class AmplitudeImage:
    values: np.ndarray  # H x W, peak 1.0 (or all zero)
    scale: float = 1.0  # peak magnitude divided out during synthesis

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# --- Field synthesis ---


def evaluate_center_field(
    center: ScatteringCenter, f: float, phi: float, cfg: RadarConfig
) -> complex:
    """Scattered field of one center at frequency f (Hz) and aspect phi (rad)."""
    if f <= 0:
        raise DomainError(f"frequency must be positive, got {f}")
    c = cfg.propagation_speed
    exponent = -2 * math.pi * f * center.gamma * math.sin(phi)
    if exponent > _MAX_EXPONENT:
        raise DomainError("aspect dependence overflows for this frequency")
    # (j f/f_c)^alpha on the principal branch
    freq_term = (f / cfg.center_frequency) ** center.alpha * cmath.exp(
        1j * math.pi * center.alpha / 2
    )
    position_term = cmath.exp(
        -1j * 4 * math.pi * f / c * (center.x * math.cos(phi) + center.y * math.sin(phi))
    )
    t = 2 * math.pi * f / c * center.length * math.sin(phi - center.phi_bar)
    length_term = float(np.sinc(t / math.pi))
    return center.amplitude * freq_term * position_term * length_term * math.exp(exponent)


def synthesize_field(asc: AscSet, cfg: RadarConfig) -> FieldGrid:
    """Sum of all center responses over the (f, phi) grid."""
    return FieldGrid(_field_from_table(asc.as_table(), cfg))


def _field_from_table(table: np.ndarray, cfg: RadarConfig) -> np.ndarray:
    if table.shape[0] == 0:
        return np.zeros((cfg.n_freq, cfg.n_aspect), dtype=np.complex128)
    c = cfg.propagation_speed
    f = cfg.frequencies()[:, None, None]
    phi = cfg.aspects()[None, :, None]
    amp, x, y, alpha, length, phi_bar, gamma = (table[:, i] for i in range(NUM_ASC_PARAMS))

    exponent = -2 * np.pi * f * gamma * np.sin(phi)
    if exponent.max() > _MAX_EXPONENT:
        raise DomainError("aspect dependence overflows for this radar band")
    freq_term = (f / cfg.center_frequency) ** alpha * np.exp(1j * np.pi * alpha / 2)
    position_term = np.exp(-1j * 4 * np.pi * f / c * (x * np.cos(phi) + y * np.sin(phi)))
    t = 2 * np.pi * f / c * length * np.sin(phi - phi_bar)
    terms = amp * freq_term * position_term * np.sinc(t / np.pi) * np.exp(exponent)
    return terms.sum(axis=-1)


def form_image(grid: FieldGrid, cfg: RadarConfig, out_h: int, out_w: int) -> AmplitudeImage:
    """Hann-window, zero-pad, inverse 2-D DFT, magnitude, peak-normalize."""
    if out_h < 8 or out_w < 8:
        raise ShapeError(f"output image must be at least 8x8, got {out_h}x{out_w}")
    values = grid.values
    n_f, n_a = values.shape
    window = np.outer(np.hanning(n_f), np.hanning(n_a))
    rows, cols = max(n_f, out_h), max(n_a, out_w)
    padded = np.zeros((rows, cols), dtype=np.complex128)
    padded[:n_f, :n_a] = values * window

    image = np.abs(np.fft.fftshift(np.fft.ifft2(padded, norm="ortho")))
    r0, c0 = rows // 2 - out_h // 2, cols // 2 - out_w // 2
    image = image[r0 : r0 + out_h, c0 : c0 + out_w]
    peak = float(image.max())
    if peak > 0:
        image = image / peak
    else:
        peak = 1.0
    return AmplitudeImage(image, peak)


def add_field_noise(values: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Complex white Gaussian noise at the given signal-to-noise ratio."""
    power = float(np.mean(np.abs(values) ** 2))
    sigma = math.sqrt(power / 10 ** (snr_db / 10) / 2)
    noise = rng.normal(0.0, sigma, values.shape) + 1j * rng.normal(0.0, sigma, values.shape)
    return values + noise


# --- Class templates ---


@dataclass(frozen=True)
class ClassTemplate:
    name: str
    table: np.ndarray  # canonical (P, 7) layout before jitter
    gamma_scale: float


_TEMPLATE_FILE = Path(__file__).resolve().parent / "_defaults" / "templates.yaml"


def load_templates(num_centers: int = 40, path: Path | None = None) -> list[ClassTemplate]:
    """Build canonical layouts from the silhouette descriptions in templates.yaml."""
    path = Path(path) if path else _TEMPLATE_FILE
    if not path.exists():
        raise ConfigError(f"template file not found: {path}")
    spec = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    entries = spec.get("classes", [])
    return [_build_template(i, entry, num_centers) for i, entry in enumerate(entries)]


def _silhouette_points(entry: dict, n: int) -> tuple[np.ndarray, np.ndarray]:
    """n points spread along the silhouette path by arc length, with the local path direction."""
    pieces = []  # (length, point_fn, direction_fn)
    for x0, y0, x1, y1 in entry.get("segments", []):
        seg_len = math.hypot(x1 - x0, y1 - y0)
        heading = math.atan2(y1 - y0, x1 - x0)
        pieces.append(
            (
                seg_len,
                lambda s, x0=x0, y0=y0, x1=x1, y1=y1: (x0 + s * (x1 - x0), y0 + s * (y1 - y0)),
                lambda s, h=heading: h,
            )
        )
    for cx, cy, r, a0, a1 in entry.get("arcs", []):
        a0, a1 = math.radians(a0), math.radians(a1)
        pieces.append(
            (abs(a1 - a0) * r,
             lambda s, cx=cx, cy=cy, r=r, a0=a0, a1=a1: (
                 cx + r * math.cos(a0 + s * (a1 - a0)), cy + r * math.sin(a0 + s * (a1 - a0))),
             lambda s, a0=a0, a1=a1: a0 + s * (a1 - a0) + math.pi / 2)
        )
    if not pieces:
        raise ConfigError(f"template {entry.get('name')!r} has no segments or arcs")
    total = sum(p[0] for p in pieces)
    # Midpoint sampling keeps closed shapes free of duplicate endpoints
    targets = (np.arange(n) + 0.5) / n * total
    points, headings = np.zeros((n, 2)), np.zeros(n)
    bounds = np.cumsum([0.0] + [p[0] for p in pieces])
    for i, t in enumerate(targets):
        k = min(int(np.searchsorted(bounds, t, side="right")) - 1, len(pieces) - 1)
        s = (t - bounds[k]) / pieces[k][0]
        points[i] = pieces[k][1](s)
        headings[i] = pieces[k][2](s)
    return points, headings


def _build_template(class_id: int, entry: dict, num_centers: int) -> ClassTemplate:
    rng = np.random.default_rng([7919, class_id])
    points, headings = _silhouette_points(entry, num_centers)
    alphas = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    weights = np.asarray(entry.get("alpha_weights", [0.1, 0.2, 0.4, 0.2, 0.1]), dtype=float)
    alpha = rng.choice(alphas, size=num_centers, p=weights / weights.sum())
    lo, hi = entry.get("amplitude_range", [0.4, 1.0])
    amplitude = rng.uniform(lo, hi, num_centers)

    distributed = rng.random(num_centers) < float(entry.get("distributed_fraction", 0.1))
    l_lo, l_hi = entry.get("length_range", [0.5, 1.5])
    length = np.where(distributed, rng.uniform(l_lo, l_hi, num_centers), 0.0)
    # Distributed scatterers face the radar; their orientation follows the path only weakly
    phi_bar = np.where(distributed, np.radians(3.0) * np.sin(headings), 0.0)

    table = np.column_stack(
        [amplitude, points[:, 0], points[:, 1], alpha, length, phi_bar, np.zeros(num_centers)]
    )
    name = str(entry.get("name", f"class-{class_id}"))
    return ClassTemplate(name, table, float(entry.get("gamma_scale", 1e-11)))


def jitter_template(template: ClassTemplate, rng: np.random.Generator) -> np.ndarray:
    """Seeded pose and per-center perturbation of a canonical layout."""
    table = template.table.copy()
    n = table.shape[0]
    theta = rng.uniform(-math.radians(5.0), math.radians(5.0))
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    x, y = table[:, 1].copy(), table[:, 2].copy()
    table[:, 1] = cos_t * x - sin_t * y + rng.normal(0.0, 0.15, n)
    table[:, 2] = sin_t * x + cos_t * y + rng.normal(0.0, 0.15, n)
    table[:, 0] *= rng.uniform(0.8, 1.2, n)
    table[:, 5] = [_wrap_angle(a + theta) for a in table[:, 5]]
    table[:, 6] = rng.uniform(-template.gamma_scale, template.gamma_scale, n)
    return table


def generate_class_sample(
    class_id: int,
    rng_seed: int,
    cfg: RadarConfig,
    templates: list[ClassTemplate] | None = None,
    image_size: int = 96,
    snr_db: float | None = None,
    sample_id: int = 0,
):
    """Draw one synthetic target of the given class. Deterministic in (class_id, rng_seed)."""
    from sanran.dataset import SarSample

    templates = templates if templates is not None else load_templates()
    if not 0 <= class_id < len(templates):
        raise DomainError(f"unknown class_id {class_id} (have {len(templates)} templates)")
    rng = np.random.default_rng([int(rng_seed), int(class_id)])
    table = jitter_template(templates[class_id], rng)
    asc = AscSet.from_table(table, class_id)

    values = _field_from_table(table, cfg)
    if snr_db is not None:
        values = add_field_noise(values, snr_db, rng)
    image = form_image(FieldGrid(values), cfg, image_size, image_size)
    return SarSample(id=sample_id, asc=asc, image=image, true_label=class_id, train_label=class_id)
