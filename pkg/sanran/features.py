"""Image branch, scattering-center graph branch and their fusion classifier."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from sanran import autodiff as ad
from sanran.asc_sim import NUM_ASC_PARAMS
from sanran.autodiff import Parameter, Tensor
from sanran.errors import DomainError, ShapeError
from sanran.layers import BatchNorm, Conv2d, Linear, Module, ResidualBlock

log = logging.getLogger(__name__)

FEATURE_MODES = ("fused", "image", "scattering")


@dataclass(frozen=True)
class ModelConfig:
    features: str = "fused"
    stem_channels: int = 16
    image_channels: tuple[int, ...] = (16, 32, 64, 128)
    graph_dims: tuple[int, ...] = (64, 64, 128)
    k: int = 8
    leaky_slope: float = 0.2
    bn_momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.features not in FEATURE_MODES:
            raise DomainError(f"model.features must be one of {FEATURE_MODES}, got {self.features!r}")
        if self.k < 1:
            raise DomainError(f"model.k must be >= 1, got {self.k}")
        if not self.image_channels or not self.graph_dims:
            raise DomainError("image_channels and graph_dims must be non-empty")

    @property
    def uses_image(self) -> bool:
        return self.features in ("fused", "image")

    @property
    def uses_scattering(self) -> bool:
        return self.features in ("fused", "scattering")

    @property
    def image_dim(self) -> int:
        return self.image_channels[-1]

    @property
    def scattering_dim(self) -> int:
        return 2 * sum(self.graph_dims)

    @property
    def fusion_dim(self) -> int:
        return self.image_dim * self.uses_image + self.scattering_dim * self.uses_scattering


class AscScaler:
    """Per-column min-max scaling of ASC parameters, fit on the training set."""

    def __init__(self, low: np.ndarray, high: np.ndarray):
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)

    @classmethod
    def fit(cls, asc: np.ndarray) -> "AscScaler":
        flat = np.asarray(asc, dtype=np.float64).reshape(-1, NUM_ASC_PARAMS)
        return cls(flat.min(axis=0), flat.max(axis=0))

    def transform(self, asc: np.ndarray) -> np.ndarray:
        span = self.high - self.low
        span = np.where(span > 0, span, 1.0)
        return ((np.asarray(asc, dtype=np.float64) - self.low) / span).astype(np.float32)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"low": self.low.copy(), "high": self.high.copy()}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "AscScaler":
        return cls(state["low"], state["high"])


# --- Image branch ---


class ImageBranch(Module):
    """Residual CNN over single-channel crops, global average pooled."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, input_size: int = 64):
        self.input_size = input_size
        self.slope = cfg.leaky_slope
        self.stem = Conv2d(1, cfg.stem_channels, 3, rng, padding=1)
        self.stem_bn = BatchNorm(cfg.stem_channels, cfg.bn_momentum)
        blocks, in_ch = [], cfg.stem_channels
        for out_ch in cfg.image_channels:
            blocks.append(ResidualBlock(in_ch, out_ch, 2, rng, cfg.leaky_slope, cfg.bn_momentum))
            in_ch = out_ch
        self.blocks = blocks

    def forward(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        if x.shape[-2:] != (self.input_size, self.input_size):
            raise ShapeError(f"image branch expects {self.input_size}x{self.input_size}, got {x.shape[-2:]}")
        x = ad.leaky_relu(self.stem_bn(self.stem(x)), self.slope)
        for block in self.blocks:
            x = block(x)
        return ad.global_avg_pool(x)


# --- Scattering branch ---


def knn_graph(features: np.ndarray, k: int) -> np.ndarray:
    """(P, d) -> (P, k) indices of the k nearest other points.

    Euclidean distance in float64, self excluded, ties broken by lower index.
    """
    features = np.asarray(features, dtype=np.float64)
    p = features.shape[0]
    if not 1 <= k < p:
        raise DomainError(f"k must satisfy 1 <= k < P, got k={k}, P={p}")
    diff = features[:, None, :] - features[None, :, :]
    dist = (diff * diff).sum(axis=-1)
    np.fill_diagonal(dist, np.inf)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def knn_graph_batch(features: np.ndarray, k: int) -> np.ndarray:
    return np.stack([knn_graph(f, k) for f in features])


@dataclass
class GraphLayerState:
    features: Tensor  # (B, P, d)
    knn: np.ndarray  # (B, P, K)
    layer: int


def edge_conv(state: GraphLayerState, weight: Parameter, slope: float = 0.2) -> Tensor:
    """x'_i = sum_k leaky(W . [x_i, x_j - x_i]) over the K neighbors j of i."""
    x = state.features
    b, p, d = x.shape
    k = state.knn.shape[-1]
    neighbors = ad.gather_neighbors(x, state.knn)
    center = ad.broadcast_to(x.reshape(b, p, 1, d), (b, p, k, d))
    edges = ad.concat([center, neighbors - center], axis=-1)
    return ad.leaky_relu(ad.matmul(edges, weight), slope).sum(axis=2)


class EdgeConv(Module):
    def __init__(
        self, in_dim: int, out_dim: int, k: int, rng: np.random.Generator, slope: float = 0.2
    ):
        self.k, self.slope = k, slope
        std = math.sqrt(2.0 / (2 * in_dim)) / k
        weight = rng.standard_normal((2 * in_dim, out_dim)) * std
        self.weight = Parameter(weight.astype(np.float32), "weight")

    def forward(self, x: Tensor, layer: int = 0) -> Tensor:
        state = GraphLayerState(x, knn_graph_batch(x.data, self.k), layer)
        return edge_conv(state, self.weight, self.slope)


class ScatteringBranch(Module):
    """Stacked EdgeConv over the ASC set. The neighbor graph is rebuilt from each layer's input."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        layers, in_dim = [], NUM_ASC_PARAMS
        for out_dim in cfg.graph_dims:
            layers.append(EdgeConv(in_dim, out_dim, cfg.k, rng, cfg.leaky_slope))
            in_dim = out_dim
        self.layers = layers

    def forward(self, asc) -> Tensor:
        x = asc if isinstance(asc, Tensor) else Tensor(np.asarray(asc, dtype=self.dtype))
        if x.ndim != 3 or x.shape[-1] != NUM_ASC_PARAMS:
            raise ShapeError(f"scattering branch expects (B, P, {NUM_ASC_PARAMS}), got {x.shape}")
        outputs = []
        for i, layer in enumerate(self.layers):
            x = layer(x, i)
            outputs.append(x)
        stacked = ad.concat(outputs, axis=-1)
        return ad.concat([ad.reduce_max(stacked, axis=1), ad.reduce_mean(stacked, axis=1)], axis=-1)


def fuse(z_s: Tensor | None, z_i: Tensor | None) -> Tensor:
    """z_F = z_S concatenated with z_I; a missing branch is skipped."""
    parts = [z for z in (z_s, z_i) if z is not None]
    if not parts:
        raise ShapeError("fuse needs at least one branch output")
    if len(parts) == 2 and z_s.shape[0] != z_i.shape[0]:
        raise ShapeError(f"batch mismatch: {z_s.shape[0]} scattering vs {z_i.shape[0]} image rows")
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)


class FusionNet(Module):
    """Image branch + scattering branch + linear head."""

    def __init__(
        self, cfg: ModelConfig, num_classes: int, rng: np.random.Generator, input_size: int = 64
    ):
        self.cfg = cfg
        self.num_classes = num_classes
        self.image = ImageBranch(cfg, rng, input_size) if cfg.uses_image else None
        self.scattering = ScatteringBranch(cfg, rng) if cfg.uses_scattering else None
        self.head = Linear(cfg.fusion_dim, num_classes, rng)

    def embed(self, images, asc) -> Tensor:
        z_s = self.scattering(asc) if self.scattering is not None else None
        z_i = self.image(images) if self.image is not None else None
        return fuse(z_s, z_i)

    def forward(self, images, asc) -> Tensor:
        return self.head(self.embed(images, asc))

    def forward_mixed(
        self, images, asc_unique, asc_map: np.ndarray, perm: np.ndarray, lam: float
    ) -> Tensor:
        """Logits for a mixed batch.

        images are already pixel-mixed. Scattering features are computed once
        per distinct sample (asc_map expands them to batch rows) and mixed at
        feature level with the same lam and perm.
        """
        z_i = self.image(images) if self.image is not None else None
        z_s = None
        if self.scattering is not None:
            z = ad.index_select(self.scattering(asc_unique), asc_map)
            z_s = lam * z + (1.0 - lam) * ad.index_select(z, perm)
        return self.head(fuse(z_s, z_i))

    def predict_proba(self, images, asc, batch_size: int = 64) -> np.ndarray:
        """Softmax outputs without recording a graph. Mode (train/eval) is left to the caller."""
        images, asc = np.asarray(images), np.asarray(asc)
        out = []
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                stop = start + batch_size
                logits = self.forward(images[start:stop], asc[start:stop])
                out.append(ad.softmax_np(logits.data.astype(np.float64)))
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))


def build_network(cfg: ModelConfig, num_classes: int, seed: int, input_size: int = 64) -> FusionNet:
    return FusionNet(cfg, num_classes, np.random.default_rng(seed), input_size)
