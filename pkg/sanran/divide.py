"""Loss-based split of the training set into clean and noisy subsets.

A two-component 1-D Gaussian mixture is fitted to the per-sample losses of
each labeled class; the posterior of the lower-mean component is the
clean probability.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from sanran.dataset import NoiseAudit, SampleBank
from sanran.errors import DataError, NumericError

log = logging.getLogger(__name__)

LOSS_CLAMP = 50.0
_LOG_2PI = math.log(2 * math.pi)


@dataclass
class LossLedger:
    ids: np.ndarray
    labels: np.ndarray  # training labels
    losses: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.losses)):
            raise NumericError("loss ledger contains non-finite losses")
        if np.any(self.losses < 0):
            raise NumericError("cross-entropy losses must be >= 0")

    def members(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def normalized(self, class_wise: bool = True) -> np.ndarray:
        """Min-max normalized losses, per labeled class or over the whole set."""
        if not class_wise:
            return normalize_losses(self.losses)
        out = np.zeros_like(self.losses, dtype=np.float64)
        for c in range(self.num_classes):
            idx = self.members(c)
            if idx.size:
                out[idx] = normalize_losses(self.losses[idx])
        return out


@dataclass(frozen=True)
class GaussianMixture1D:
    weights: tuple[float, float]
    means: tuple[float, float]  # ascending
    variances: tuple[float, float]
    log_likelihoods: tuple[float, ...] = ()
    degenerate: bool = False

    def _log_joint(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for w, mu, var in zip(self.weights, self.means, self.variances):
            log_w = math.log(w) if w > 0 else -np.inf
            out.append(log_w - 0.5 * (_LOG_2PI + math.log(var)) - (x - mu) ** 2 / (2 * var))
        return out[0], out[1]

    def clean_probability(self, x) -> np.ndarray:
        """Posterior of the low-loss component."""
        x = np.asarray(x, dtype=np.float64)
        if self.degenerate:
            return np.ones_like(x)
        a, b = self._log_joint(x)
        return np.exp(a - np.logaddexp(a, b))

    def log_likelihood(self, x) -> float:
        a, b = self._log_joint(np.asarray(x, dtype=np.float64))
        return float(np.logaddexp(a, b).sum())

    def to_dict(self) -> dict:
        return {
            "w0": self.weights[0], "w1": self.weights[1],
            "mu0": self.means[0], "mu1": self.means[1],
            "var0": self.variances[0], "var1": self.variances[1],
        }


def normalize_losses(losses: np.ndarray) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        return losses
    low, high = losses.min(), losses.max()
    if high - low <= 0:
        return np.zeros_like(losses)
    return (losses - low) / (high - low)


def fit_gmm(
    losses, tol: float = 1e-6, max_iter: int = 100, var_floor: float = 1e-4
) -> GaussianMixture1D:
    """EM for a two-component 1-D mixture.

    Means start at the 10th and 90th percentiles with equal weights and the
    pooled variance. Stops when the log-likelihood gains less than tol.
    """
    x = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("fit_gmm received non-finite losses")
    if x.size < 4 or np.ptp(x) == 0:
        mean = float(x.mean()) if x.size else 0.0
        return GaussianMixture1D((1.0, 0.0), (mean, mean), (var_floor, var_floor), degenerate=True)

    pooled = max(float(x.var()), var_floor)
    lo, hi = np.percentile(x, [10, 90])
    gmm = GaussianMixture1D((0.5, 0.5), (float(lo), float(hi)), (pooled, pooled))
    history = [gmm.log_likelihood(x)]
    for _ in range(max_iter):
        a, b = gmm._log_joint(x)
        resp0 = np.exp(a - np.logaddexp(a, b))
        resp = np.stack([resp0, 1.0 - resp0])
        nk = np.maximum(resp.sum(axis=1), 1e-10)
        means = (resp * x).sum(axis=1) / nk
        variances = np.maximum((resp * (x - means[:, None]) ** 2).sum(axis=1) / nk, var_floor)
        gmm = GaussianMixture1D(tuple(nk / x.size), tuple(means), tuple(variances))
        ll = gmm.log_likelihood(x)
        if ll < history[-1] - 1e-8 * max(1.0, abs(history[-1])):
            raise NumericError(f"EM log-likelihood decreased from {history[-1]:.6f} to {ll:.6f}")
        history.append(ll)
        if ll - history[-2] < tol:
            break

    order = np.argsort(gmm.means, kind="stable")
    return GaussianMixture1D(
        tuple(float(gmm.weights[i]) for i in order),
        tuple(float(gmm.means[i]) for i in order),
        tuple(float(gmm.variances[i]) for i in order),
        tuple(history),
    )


# --- Division ---


@dataclass(frozen=True)
class Division:
    clean_ids: np.ndarray
    clean_labels: np.ndarray
    clean_probs: np.ndarray  # pi_i of the clean samples
    noisy_ids: np.ndarray
    delta: float
    producer: str = ""
    epoch: int = -1
    probs_by_id: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_clean(self) -> int:
        return int(len(self.clean_ids))

    @property
    def num_noisy(self) -> int:
        return int(len(self.noisy_ids))

    def clean_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.clean_labels, minlength=num_classes)


def per_sample_losses(net, bank: SampleBank, crop_size: int, batch_size: int = 64) -> LossLedger:
    """Cross-entropy of each training sample against its training label.

    Evaluated on center crops in eval mode. Non-finite losses are clamped.
    """
    was_training = net.training
    net.eval()
    try:
        probs = net.predict_proba(bank.center_crops(crop_size), bank.asc, batch_size)
    finally:
        net.train(was_training)
    with np.errstate(divide="ignore"):
        losses = -np.log(probs[np.arange(len(bank)), bank.train_labels])
    bad = ~np.isfinite(losses)
    if bad.any():
        log.warning("clamping %d non-finite losses to %.1f", int(bad.sum()), LOSS_CLAMP)
        losses = np.where(bad, LOSS_CLAMP, losses)
    losses = np.minimum(losses, LOSS_CLAMP)
    return LossLedger(bank.ids.copy(), bank.train_labels.copy(), losses, net.num_classes)


def fit_class_mixtures(ledger: LossLedger, class_wise: bool = True) -> dict:
    """One mixture per labeled class, or a single one under key None."""
    if not class_wise:
        return {None: fit_gmm(ledger.normalized(class_wise=False))}
    norm = ledger.normalized(class_wise=True)
    gmms = {}
    for c in range(ledger.num_classes):
        idx = ledger.members(c)
        if idx.size:
            gmms[c] = fit_gmm(norm[idx])
    return gmms


def divide(
    ledger: LossLedger,
    gmms: dict,
    delta: float = 0.6,
    producer: str = "",
    epoch: int = -1,
    min_clean: int = 1,
) -> Division:
    """Threshold clean probabilities at delta (inclusive).

    Each populated class keeps its min_clean most probable samples clean even
    when none reach delta.
    """
    if delta < 0:
        raise DataError(f"delta must be >= 0, got {delta}")
    class_wise = None not in gmms
    norm = ledger.normalized(class_wise)
    probs = np.zeros(len(ledger.ids))
    if class_wise:
        for c in range(ledger.num_classes):
            idx = ledger.members(c)
            if not idx.size:
                continue
            if c not in gmms:
                raise DataError(f"no mixture fitted for class {c}")
            probs[idx] = gmms[c].clean_probability(norm[idx])
    else:
        probs = gmms[None].clean_probability(norm)

    clean = probs >= delta
    for c in range(ledger.num_classes):
        idx = ledger.members(c)
        short = min(min_clean, idx.size) - int(clean[idx].sum())
        if short > 0:
            order = idx[np.argsort(-probs[idx], kind="stable")]
            keep = order[~clean[order]][:short]
            clean[keep] = True
            log.warning("class %d: %d sample(s) kept clean below delta=%.2f", c, short, delta)

    return Division(
        clean_ids=ledger.ids[clean],
        clean_labels=ledger.labels[clean],
        clean_probs=probs[clean],
        noisy_ids=ledger.ids[~clean],
        delta=delta,
        producer=producer,
        epoch=epoch,
        probs_by_id=dict(zip(ledger.ids.tolist(), probs.tolist())),
    )


def division_metrics(
    division: Division, audit: NoiseAudit, class_id: int | None = None
) -> tuple[float, float]:
    """(division_accuracy, division_error).

    accuracy: share of correctly labeled samples assigned clean.
    error: share of mislabeled samples assigned clean.
    NaN when a denominator is empty. class_id restricts both to one training label.
    """
    clean_ids, clean_labels = division.clean_ids, division.clean_labels
    noisy_ids = division.noisy_ids
    if class_id is not None:
        clean_ids = clean_ids[clean_labels == class_id]
        label_of = dict(zip(audit.ids.tolist(), audit.train_labels.tolist()))
        noisy_ids = np.array([i for i in noisy_ids if label_of[int(i)] == class_id], dtype=np.int64)
    clean_ok = audit.is_correct(clean_ids)
    noisy_ok = audit.is_correct(noisy_ids)
    correct = int(clean_ok.sum() + noisy_ok.sum())
    mislabeled = int((~clean_ok).sum() + (~noisy_ok).sum())
    accuracy = clean_ok.sum() / correct if correct else float("nan")
    error = (~clean_ok).sum() / mislabeled if mislabeled else float("nan")
    return float(accuracy), float(error)
