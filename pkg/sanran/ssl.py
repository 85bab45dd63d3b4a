"""Semi-supervised training on a clean/noisy division.

Clean samples get refined labels (co-refinement), noisy samples get
guessed labels from both branches (co-guessing), the guesses are
re-weighted towards a target class distribution, and everything is
trained through a mixed batch.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from sanran import autodiff as ad
from sanran.dataset import AugmentationSpec, SampleBank, augment_batch, center_crop
from sanran.divide import Division
from sanran.errors import DomainError, NumericError, ShapeError

log = logging.getLogger(__name__)

ALIGNMENT_MODES = ("joint", "ratio", "single", "none")
EPS = 1e-8


@dataclass(frozen=True)
class SslHyper:
    temperature: float = 0.5
    alpha: float = 4.0
    lambda_u: float = 25.0
    rampup_epochs: int = 16
    augmentations: int = 2
    delta: float = 0.6
    class_wise: bool = True
    alignment: str = "joint"
    use_noisy: bool = True
    target_marginal: str = "uniform"  # uniform | empirical
    ema_momentum: float = 0.99
    mse_reduction: str = "mean"  # mean | sum (over classes)

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise DomainError("ssl.temperature must be > 0")
        if self.alpha <= 0:
            raise DomainError("ssl.alpha must be > 0")
        if self.delta < 0:
            raise DomainError("ssl.delta must be >= 0")
        if self.alignment not in ALIGNMENT_MODES:
            raise DomainError(f"ssl.alignment must be one of {ALIGNMENT_MODES}")
        if self.target_marginal not in ("uniform", "empirical"):
            raise DomainError("ssl.target_marginal must be 'uniform' or 'empirical'")
        if self.mse_reduction not in ("mean", "sum"):
            raise DomainError("ssl.mse_reduction must be 'mean' or 'sum'")
        if self.augmentations < 1 or self.rampup_epochs < 1:
            raise DomainError("ssl.augmentations and ssl.rampup_epochs must be >= 1")

    def lambda_u_at(self, progress: float) -> float:
        """Unsupervised weight, ramped linearly over rampup_epochs after warm-up."""
        return self.lambda_u * float(np.clip(progress / self.rampup_epochs, 0.0, 1.0))


@dataclass
class AlignmentState:
    target: np.ndarray  # p_y, desired class distribution
    clean_marginal: np.ndarray  # p~_y, clean-subset share per class
    guess_marginal: np.ndarray  # p~_q, running mean of aligned guesses
    momentum: float = 0.99

    @classmethod
    def create(cls, num_classes: int, target: np.ndarray | None = None, momentum: float = 0.99):
        uniform = np.full(num_classes, 1.0 / num_classes)
        target = uniform.copy() if target is None else np.asarray(target, dtype=np.float64)
        return cls(target, uniform / 2, uniform.copy(), momentum)

    def set_clean(self, division: Division, num_classes: int, total: int) -> None:
        self.clean_marginal = division.clean_counts(num_classes) / max(total, 1)

    def observe(self, q_bar: np.ndarray) -> None:
        batch_mean = np.asarray(q_bar, dtype=np.float64).reshape(-1, len(self.guess_marginal)).mean(axis=0)
        self.guess_marginal = self.momentum * self.guess_marginal + (1 - self.momentum) * batch_mean


# --- label operations ---


def co_refine(label_onehot: np.ndarray, clean_prob, preds: np.ndarray) -> np.ndarray:
    """y' = pi * y + (1 - pi) * mean_m p_m. preds is (M, ..., C)."""
    pi = np.asarray(clean_prob, dtype=np.float64)
    if np.any(pi < 0) or np.any(pi > 1):
        raise DomainError("clean probability must lie in [0, 1]")
    preds = np.asarray(preds, dtype=np.float64)
    if preds.shape[1:] != np.shape(label_onehot):
        raise ShapeError(f"predictions {preds.shape} do not match labels {np.shape(label_onehot)}")
    pi = pi[..., None] if pi.ndim else pi
    return pi * label_onehot + (1.0 - pi) * preds.mean(axis=0)


def co_guess(preds_self: np.ndarray, preds_other: np.ndarray) -> np.ndarray:
    """Average over both branches and all augmentations. Inputs are (M, ..., C)."""
    preds_self, preds_other = np.asarray(preds_self), np.asarray(preds_other)
    if preds_self.shape != preds_other.shape:
        raise ShapeError(f"branch predictions differ in shape: {preds_self.shape} vs {preds_other.shape}")
    return (preds_self.mean(axis=0) + preds_other.mean(axis=0)) / 2


def alignment_weights(state: AlignmentState, mode: str = "joint") -> np.ndarray:
    """Per-class re-weighting applied to a guessed distribution."""
    denom = np.maximum(state.guess_marginal, EPS)
    if mode == "joint":
        return np.maximum(state.target - state.clean_marginal, EPS) / denom
    if mode == "ratio":
        return np.maximum(state.target, EPS) / denom
    if mode == "single":
        clean = state.clean_marginal / max(state.clean_marginal.sum(), EPS)
        return np.maximum(clean, EPS) / denom
    if mode == "none":
        return np.ones_like(state.target)
    raise DomainError(f"unknown alignment mode {mode!r}")


def align(q: np.ndarray, state: AlignmentState, mode: str = "joint") -> np.ndarray:
    """q_bar = normalize(q * w). Updates the running guess marginal."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q.sum(axis=-1) <= 0):
        raise DomainError("cannot align an all-zero guess")
    aligned = q * alignment_weights(state, mode)
    aligned = aligned / aligned.sum(axis=-1, keepdims=True)
    state.observe(aligned)
    return aligned


def sharpen(p: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    p = np.asarray(p, dtype=np.float64) ** (1.0 / temperature)
    return p / p.sum(axis=-1, keepdims=True)


def sample_mix_lambda(alpha: float, rng: np.random.Generator) -> float:
    """lambda' = max(lambda, 1 - lambda) with lambda ~ Beta(alpha, alpha)."""
    lam = float(rng.beta(alpha, alpha))
    return max(lam, 1.0 - lam)


def mix_pair(first, second, alpha: float, seed) -> tuple[np.ndarray, np.ndarray, float]:
    """Convex combination of two (input, target) pairs with a shared lambda'."""
    (x1, p1), (x2, p2) = first, second
    if np.shape(x1) != np.shape(x2) or np.shape(p1) != np.shape(p2):
        raise ShapeError("mix_pair operands must have matching shapes")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lam = sample_mix_lambda(alpha, rng)
    x = lam * np.asarray(x1) + (1 - lam) * np.asarray(x2)
    p = lam * np.asarray(p1) + (1 - lam) * np.asarray(p2)
    return x, p, lam


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]


# --- mixed batch ---


@dataclass
class MixedBatch:
    images: np.ndarray  # (n, H, W) pixel-mixed
    asc: np.ndarray  # (n_unique, P, 7)
    asc_map: np.ndarray  # (n,) row -> asc index
    perm: np.ndarray  # (n,) mixing partner
    lam: float
    targets: np.ndarray  # (n, C) mixed soft targets
    num_labeled: int  # first rows come from the clean subset


@dataclass(frozen=True)
class StepSettings:
    lr: float
    momentum: float
    weight_decay: float
    batch_size: int
    crop_size: int
    augment: AugmentationSpec


def _predict(net, views: list[np.ndarray], asc: np.ndarray) -> np.ndarray:
    return np.stack([net.predict_proba(v, asc, batch_size=len(v)) for v in views])


def build_mixed_batch(
    net, peer, bank: SampleBank, clean_pos: np.ndarray, clean_probs: np.ndarray,
    noisy_pos: np.ndarray, hyper: SslHyper, alignment: AlignmentState,
    spec: AugmentationSpec, rng: np.random.Generator,
) -> MixedBatch:
    """Pseudo-label a clean and a noisy mini-batch, then mix them together."""
    num_classes = net.num_classes
    m = hyper.augmentations
    x_views = [augment_batch(bank.images[clean_pos], spec, rng) for _ in range(m)]
    u_views = [augment_batch(bank.images[noisy_pos], spec, rng) for _ in range(m)] if len(noisy_pos) else []
    x_asc, u_asc = bank.asc[clean_pos], bank.asc[noisy_pos]

    was_training, peer_was_training = net.training, peer.training
    net.eval()
    peer.eval()
    try:
        refined = co_refine(
            one_hot(bank.train_labels[clean_pos], num_classes), clean_probs, _predict(net, x_views, x_asc)
        )
        targets_x = sharpen(refined, hyper.temperature)
        if u_views:
            guess = co_guess(_predict(net, u_views, u_asc), _predict(peer, u_views, u_asc))
            targets_u = sharpen(align(guess, alignment, hyper.alignment), hyper.temperature)
    finally:
        net.train(was_training)
        peer.train(peer_was_training)

    n_x, n_u = len(clean_pos), len(noisy_pos)
    images = np.concatenate(x_views + u_views)
    targets = np.concatenate([targets_x] * m + ([targets_u] * m if u_views else []))
    asc_map = np.concatenate(
        [np.arange(n_x)] * m + ([n_x + np.arange(n_u)] * m if u_views else [])
    )
    perm = rng.permutation(len(images))
    mixed_images, mixed_targets, lam = mix_pair((images, targets), (images[perm], targets[perm]), hyper.alpha, rng)
    return MixedBatch(
        images=mixed_images.astype(np.float32),
        asc=np.concatenate([x_asc, u_asc]),
        asc_map=asc_map,
        perm=perm,
        lam=lam,
        targets=mixed_targets,
        num_labeled=m * n_x,
    )


def mixed_batch_loss(net, batch: MixedBatch, lambda_u: float, mse_reduction: str = "mean"):
    """(total, Lx, Lu): soft cross-entropy on labeled rows, MSE on the rest."""
    logits = net.forward_mixed(batch.images, batch.asc, batch.asc_map, batch.perm, batch.lam)
    n = batch.num_labeled
    targets = batch.targets.astype(logits.dtype)
    lx = -(ad.log_softmax(logits[:n]) * targets[:n]).sum(axis=1).mean()
    if n < len(targets):
        diff = ad.softmax(logits[n:]) - targets[n:]
        sq = diff * diff
        lu = sq.mean() if mse_reduction == "mean" else sq.sum(axis=1).mean()
    else:
        lu = ad.Tensor(np.zeros((), dtype=logits.dtype))
    return lx + lambda_u * lu, lx, lu


# --- epoch loops ---


@dataclass
class EpochLosses:
    ce: float
    mse: float
    lambda_u: float
    num_clean: int
    num_noisy: int
    steps: int


def _check_finite(loss, what: str) -> None:
    if not math.isfinite(loss.item()):
        raise NumericError(f"{what} became non-finite")


def semi_supervised_step(
    branch, peer, bank: SampleBank, division: Division, hyper: SslHyper,
    settings: StepSettings, progress: float,
) -> EpochLosses:
    """One pass over the clean subset of `division` (produced by the peer branch).

    progress is the number of epochs since warm-up ended; it drives the
    lambda_u ramp. The noisy subset is cycled to match each clean batch.
    """
    net, rng = branch.net, branch.rng
    branch.alignment.set_clean(division, net.num_classes, len(bank))
    clean_pos = bank.positions(division.clean_ids)
    noisy_pos = bank.positions(division.noisy_ids) if hyper.use_noisy else np.zeros(0, dtype=np.int64)
    if not len(clean_pos):
        raise NumericError("division has an empty clean subset")

    clean_order = rng.permutation(len(clean_pos))
    noisy_order = rng.permutation(len(noisy_pos))
    bs = settings.batch_size
    steps = math.ceil(len(clean_pos) / bs)
    totals = np.zeros(2)
    lambda_u = 0.0
    net.train()
    for step in range(steps):
        x_idx = clean_order[step * bs : (step + 1) * bs]
        if len(noisy_pos):
            u_idx = noisy_order[np.arange(step * bs, step * bs + len(x_idx)) % len(noisy_pos)]
        else:
            u_idx = []
        lambda_u = hyper.lambda_u_at(progress + step / steps)
        batch = build_mixed_batch(
            net, peer, bank, clean_pos[x_idx], division.clean_probs[x_idx],
            noisy_pos[u_idx] if len(noisy_pos) else noisy_pos, hyper, branch.alignment,
            settings.augment, rng,
        )
        total, lx, lu = mixed_batch_loss(net, batch, lambda_u, hyper.mse_reduction)
        _check_finite(total, f"{branch.name} semi-supervised loss")
        total.backward()
        ad.sgd_step(net.parameters(), settings.lr, settings.momentum, settings.weight_decay)
        totals += (lx.item(), lu.item())

    return EpochLosses(
        ce=float(totals[0] / steps), mse=float(totals[1] / steps), lambda_u=lambda_u,
        num_clean=len(clean_pos), num_noisy=len(noisy_pos), steps=steps,
    )


def cross_entropy_epoch(
    branch, bank: SampleBank, settings: StepSettings, augmented: bool = False
) -> float:
    """Plain cross-entropy on training labels; center crops unless augmented."""
    net, rng = branch.net, branch.rng
    targets_all = one_hot(bank.train_labels, net.num_classes).astype(np.float32)
    order = rng.permutation(len(bank))
    bs = settings.batch_size
    total, steps = 0.0, 0
    net.train()
    for start in range(0, len(order), bs):
        pos = order[start : start + bs]
        if augmented:
            images = augment_batch(bank.images[pos], settings.augment, rng)
        else:
            images = center_crop(bank.images[pos], settings.crop_size)
        logits = net(images, bank.asc[pos])
        loss = -(ad.log_softmax(logits) * targets_all[pos]).sum(axis=1).mean()
        _check_finite(loss, f"{branch.name} cross-entropy")
        loss.backward()
        ad.sgd_step(net.parameters(), settings.lr, settings.momentum, settings.weight_decay)
        total += loss.item()
        steps += 1
    return total / max(steps, 1)


def warm_up(branch, bank: SampleBank, settings: StepSettings, epochs: int) -> list[float]:
    """Cross-entropy on center crops for `epochs` epochs. Returns per-epoch mean loss."""
    return [cross_entropy_epoch(branch, bank, settings) for _ in range(epochs)]
