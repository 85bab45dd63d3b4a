import logging
import math

import numpy as np
import pytest

from sanran.dataset import NoiseAudit, SampleBank
from sanran.divide import (
    LOSS_CLAMP,
    Division,
    LossLedger,
    divide,
    division_metrics,
    fit_class_mixtures,
    fit_gmm,
    normalize_losses,
    per_sample_losses,
)
from sanran.errors import DataError, NumericError


class FixedNet:
    """Stands in for a branch network with known softmax outputs."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.num_classes = self.probs.shape[1]
        self.training = True

    def eval(self):
        self.training = False
        return self

    def train(self, mode=True):
        self.training = mode
        return self

    def predict_proba(self, images, asc, batch_size=64):
        assert not self.training
        assert images.shape[-2:] == (4, 4)
        return self.probs


def bank_with_labels(labels):
    n = len(labels)
    labels = np.asarray(labels, dtype=np.int64)
    return SampleBank(
        np.arange(n, dtype=np.int64), np.zeros((n, 2, 7), np.float32),
        np.zeros((n, 8, 8), np.float32), labels.copy(), labels.copy(),
    )


def two_cluster_ledger(seed=0, per_class=40, num_classes=3):
    """Per class: 70% low losses around 0.2, 30% high losses around 2.0."""
    rng = np.random.default_rng(seed)
    labels, losses, noisy = [], [], []
    for c in range(num_classes):
        n_bad = int(per_class * 0.3)
        losses += list(rng.normal(0.2, 0.02, per_class - n_bad)) + list(rng.normal(2.0, 0.05, n_bad))
        noisy += [False] * (per_class - n_bad) + [True] * n_bad
        labels += [c] * per_class
    n = len(labels)
    ledger = LossLedger(np.arange(n), np.array(labels), np.abs(np.array(losses)), num_classes)
    return ledger, np.array(noisy)


def test_separated_clusters():
    gmm = fit_gmm(np.r_[np.zeros(50), np.ones(50)])
    assert gmm.means == pytest.approx((0.0, 1.0), abs=1e-3)
    assert gmm.weights == pytest.approx((0.5, 0.5), abs=1e-3)
    assert np.all(gmm.clean_probability(np.zeros(3)) >= 0.999)
    assert np.all(gmm.clean_probability(np.ones(3)) <= 0.001)


def test_recovers_gaussian_components():
    rng = np.random.default_rng(0)
    x = np.r_[rng.normal(0.2, 0.05, 250), rng.normal(0.8, 0.05, 250)]
    gmm = fit_gmm(x)
    assert gmm.means[0] == pytest.approx(0.2, abs=0.03)
    assert gmm.means[1] == pytest.approx(0.8, abs=0.03)
    correct = np.r_[gmm.clean_probability(x[:250]) > 0.5, gmm.clean_probability(x[250:]) < 0.5]
    assert correct.mean() >= 0.99


@pytest.mark.parametrize("seed", range(5))
def test_log_likelihood_never_decreases(seed):
    rng = np.random.default_rng(seed)
    x = np.r_[rng.exponential(0.1, 80), rng.uniform(0.3, 1.0, 20)]
    history = np.array(fit_gmm(x).log_likelihoods)
    assert len(history) >= 2
    assert np.all(np.diff(history) >= -1e-9)


def test_posterior_matches_closed_form():
    rng = np.random.default_rng(1)
    x = np.r_[rng.normal(0.1, 0.1, 60), rng.normal(0.7, 0.2, 40)]
    gmm = fit_gmm(x)

    def density(w, mu, var):
        return w * np.exp(-((x - mu) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)

    low = density(gmm.weights[0], gmm.means[0], gmm.variances[0])
    high = density(gmm.weights[1], gmm.means[1], gmm.variances[1])
    np.testing.assert_allclose(gmm.clean_probability(x), low / (low + high), atol=1e-9)


@pytest.mark.parametrize("losses", [np.full(10, 0.3), np.array([0.1, 0.9, 0.5])])
def test_degenerate_input_treats_everything_as_clean(losses):
    gmm = fit_gmm(losses)
    assert gmm.degenerate
    np.testing.assert_array_equal(gmm.clean_probability(losses), 1.0)


def test_variance_floor():
    gmm = fit_gmm(np.r_[np.zeros(20), np.ones(20)], var_floor=1e-3)
    assert min(gmm.variances) >= 1e-3


def test_fit_gmm_rejects_non_finite():
    with pytest.raises(NumericError):
        fit_gmm(np.array([0.1, np.nan, 0.3, 0.4]))


def test_normalize_losses():
    np.testing.assert_allclose(normalize_losses(np.array([2.0, 4.0, 3.0])), [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(normalize_losses(np.full(3, 7.0)), 0.0)


def test_ledger_rejects_invalid_losses():
    with pytest.raises(NumericError):
        LossLedger(np.arange(2), np.zeros(2, int), np.array([0.1, -0.2]), 2)
    with pytest.raises(NumericError):
        LossLedger(np.arange(2), np.zeros(2, int), np.array([0.1, np.inf]), 2)


def test_per_sample_losses_values():
    probs = np.array([[1.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3], [0.2, 0.3, 0.5]])
    net = FixedNet(probs)
    ledger = per_sample_losses(net, bank_with_labels([0, 1, 2]), crop_size=4)
    np.testing.assert_allclose(ledger.losses, [0.0, math.log(3), -math.log(0.5)], atol=1e-12)
    assert net.training
    assert sum(len(ledger.members(c)) for c in range(3)) == 3


def test_per_sample_losses_clamps_impossible_labels(caplog):
    net = FixedNet(np.array([[1.0, 0.0], [0.5, 0.5]]))
    with caplog.at_level(logging.WARNING, logger="sanran.divide"):
        ledger = per_sample_losses(net, bank_with_labels([1, 0]), crop_size=4)
    assert ledger.losses[0] == LOSS_CLAMP
    assert "clamping 1" in caplog.text


def test_class_wise_fit_ignores_other_classes():
    ledger, _ = two_cluster_ledger()
    base = divide(ledger, fit_class_mixtures(ledger), 0.6)

    losses = ledger.losses.copy()
    others = ledger.labels != 0
    losses[others] = losses[others] * 3 + 1
    perturbed = LossLedger(ledger.ids, ledger.labels, losses, ledger.num_classes)
    moved = divide(perturbed, fit_class_mixtures(perturbed), 0.6)

    for i in ledger.members(0):
        assert moved.probs_by_id[i] == base.probs_by_id[i]


def test_division_matches_clusters_and_partitions():
    ledger, noisy = two_cluster_ledger()
    division = divide(ledger, fit_class_mixtures(ledger), 0.6, producer="A", epoch=3)
    np.testing.assert_array_equal(np.sort(division.noisy_ids), np.flatnonzero(noisy))
    assert division.num_clean + division.num_noisy == len(ledger.ids)
    assert not set(division.clean_ids) & set(division.noisy_ids)
    assert (division.producer, division.epoch) == ("A", 3)
    np.testing.assert_array_equal(division.clean_counts(3), [28, 28, 28])


def test_global_mixture_ablation():
    ledger, noisy = two_cluster_ledger()
    gmms = fit_class_mixtures(ledger, class_wise=False)
    assert list(gmms) == [None]
    division = divide(ledger, gmms, 0.6)
    np.testing.assert_array_equal(np.sort(division.noisy_ids), np.flatnonzero(noisy))


def test_threshold_extremes():
    ledger, _ = two_cluster_ledger()
    gmms = fit_class_mixtures(ledger)
    assert divide(ledger, gmms, 0.0).num_noisy == 0
    assert divide(ledger, gmms, 1.5, min_clean=0).num_clean == 0
    # the per-class minimum keeps one anchor per class
    anchored = divide(ledger, gmms, 1.5)
    np.testing.assert_array_equal(anchored.clean_counts(3), [1, 1, 1])


def test_threshold_is_inclusive():
    ledger = LossLedger(np.arange(4), np.zeros(4, int), np.full(4, 0.5), 1)
    division = divide(ledger, fit_class_mixtures(ledger), 1.0)
    assert division.num_clean == 4


def test_missing_class_mixture():
    ledger, _ = two_cluster_ledger()
    gmms = fit_class_mixtures(ledger)
    del gmms[1]
    with pytest.raises(DataError):
        divide(ledger, gmms, 0.6)


def audit_for(noisy):
    ids = np.arange(len(noisy))
    true = np.zeros(len(noisy), dtype=np.int64)
    return NoiseAudit(ids, true, np.where(noisy, 1, 0))


def division_from_mask(clean_mask):
    ids = np.arange(len(clean_mask))
    return Division(
        ids[clean_mask], np.zeros(clean_mask.sum(), np.int64), np.ones(clean_mask.sum()),
        ids[~clean_mask], 0.6,
    )


def test_division_metrics_perfect_and_all_clean():
    noisy = np.array([False] * 6 + [True] * 4)
    audit = audit_for(noisy)
    assert division_metrics(division_from_mask(~noisy), audit) == (1.0, 0.0)
    assert division_metrics(division_from_mask(np.ones(10, bool)), audit) == (1.0, 1.0)


def test_division_metrics_empty_denominator_is_nan():
    audit = audit_for(np.zeros(5, bool))
    accuracy, error = division_metrics(division_from_mask(np.ones(5, bool)), audit)
    assert accuracy == 1.0
    assert math.isnan(error)


def test_division_metrics_random_assignment():
    rng = np.random.default_rng(0)
    noisy = np.zeros(1000, bool)
    noisy[rng.choice(1000, 400, replace=False)] = True
    accuracy, error = division_metrics(division_from_mask(rng.random(1000) < 0.5), audit_for(noisy))
    assert accuracy == pytest.approx(0.5, abs=0.05)
    assert error == pytest.approx(0.5, abs=0.05)


def test_division_metrics_per_class():
    ids = np.arange(4)
    audit = NoiseAudit(ids, np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
    division = Division(np.array([0, 1]), np.array([0, 1]), np.ones(2), np.array([2, 3]), 0.6)
    # class 1 by training label: id 1 is mislabeled and clean, ids 2 and 3 are correct and noisy
    assert division_metrics(division, audit, class_id=1) == (0.0, 1.0)
    accuracy, error = division_metrics(division, audit, class_id=0)
    assert accuracy == 1.0 and math.isnan(error)
