import numpy as np
import pytest

from sanran.autodiff import Tensor
from sanran.cotrain import build_branch
from sanran.dataset import AugmentationSpec, SampleBank
from sanran.divide import Division
from sanran.errors import DomainError, ShapeError
from sanran.features import ModelConfig
from sanran.ssl import (
    AlignmentState,
    MixedBatch,
    SslHyper,
    StepSettings,
    align,
    build_mixed_batch,
    co_guess,
    co_refine,
    mix_pair,
    mixed_batch_loss,
    sample_mix_lambda,
    semi_supervised_step,
    sharpen,
    warm_up,
)

TINY_MODEL = ModelConfig(stem_channels=2, image_channels=(4,), graph_dims=(4, 4), k=2)
SPEC = AugmentationSpec(crop_size=16, region=20)


def entropy(p):
    p = np.asarray(p)
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def random_simplex(rng, shape):
    p = rng.random(shape) + 1e-3
    return p / p.sum(axis=-1, keepdims=True)


def test_co_refine_examples():
    y = np.array([1.0, 0.0, 0.0])
    preds = np.array([[0.4, 0.6, 0.0], [0.6, 0.4, 0.0]])
    np.testing.assert_allclose(co_refine(y, 1.0, preds), y)
    np.testing.assert_allclose(co_refine(y, 0.0, preds), [0.5, 0.5, 0.0])
    np.testing.assert_allclose(co_refine(y, 0.6, preds), [0.8, 0.2, 0.0])


def test_co_refine_batches_clean_probabilities():
    labels = np.eye(2)
    preds = np.full((3, 2, 2), 0.5)
    out = co_refine(labels, np.array([1.0, 0.0]), preds)
    np.testing.assert_allclose(out, [[1.0, 0.0], [0.5, 0.5]])


def test_co_refine_rejects_bad_inputs():
    with pytest.raises(DomainError):
        co_refine(np.array([1.0, 0.0]), 1.2, np.full((2, 2), 0.5))
    with pytest.raises(ShapeError):
        co_refine(np.array([1.0, 0.0]), 0.5, np.full((2, 3), 1 / 3))


def test_co_guess_examples():
    np.testing.assert_allclose(co_guess(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])), [0.5, 0.5])
    preds = random_simplex(np.random.default_rng(0), (2, 5, 3))
    np.testing.assert_allclose(co_guess(preds, preds), preds.mean(axis=0))
    with pytest.raises(ShapeError):
        co_guess(preds, preds[:1])


def test_align_with_constant_weights_is_identity():
    state = AlignmentState(np.array([0.5, 0.5]), np.array([0.25, 0.25]), np.array([0.25, 0.25]))
    out = align(np.array([0.7, 0.3]), state)
    np.testing.assert_allclose(out, [0.7, 0.3])
    np.testing.assert_allclose(state.guess_marginal, 0.99 * 0.25 + 0.01 * np.array([0.7, 0.3]))


def test_align_proportional_gap_preserves_guess():
    state = AlignmentState(np.array([0.5, 0.3, 0.2]), np.array([0.1, 0.1, 0.1]), np.array([0.4, 0.2, 0.1]))
    q = np.array([0.2, 0.5, 0.3])
    np.testing.assert_allclose(align(q, state), q, rtol=1e-12)


def test_align_rejects_zero_guess():
    with pytest.raises(DomainError):
        align(np.zeros(3), AlignmentState.create(3))


def test_align_pulls_running_marginal_towards_target():
    rng = np.random.default_rng(0)
    guesses = rng.dirichlet([4.0, 1.0, 1.0], size=500)
    state = AlignmentState.create(3)
    state.clean_marginal = np.zeros(3)
    aligned = np.array([align(q, state) for q in guesses])
    target = np.full(3, 1 / 3)
    unaligned_gap = np.abs(guesses.mean(axis=0) - target).sum()
    assert np.abs(state.guess_marginal - target).sum() < unaligned_gap
    assert np.abs(aligned[250:].mean(axis=0) - target).sum() < unaligned_gap


def test_alignment_modes():
    state = AlignmentState(np.array([0.5, 0.5]), np.array([0.4, 0.1]), np.array([0.5, 0.5]))
    q = np.array([0.5, 0.5])
    joint = align(q, AlignmentState(**vars(state)), mode="joint")
    assert joint[1] > joint[0]
    np.testing.assert_allclose(align(q, AlignmentState(**vars(state)), mode="none"), q)
    np.testing.assert_allclose(align(q, AlignmentState(**vars(state)), mode="ratio"), q)
    single = align(q, AlignmentState(**vars(state)), mode="single")
    assert single[0] > single[1]


def test_sharpen_examples():
    p = np.array([0.3, 0.7])
    np.testing.assert_allclose(sharpen(p, 1.0), p)
    np.testing.assert_allclose(sharpen(np.array([0.5, 0.5]), 0.1), [0.5, 0.5])
    np.testing.assert_allclose(sharpen(np.array([0.8, 0.2]), 0.5), [0.941176, 0.058824], atol=1e-6)
    np.testing.assert_array_equal(sharpen(np.array([1.0, 0.0]), 0.5), [1.0, 0.0])
    with pytest.raises(DomainError):
        sharpen(p, 0.0)


def test_sharpen_lowers_entropy():
    p = random_simplex(np.random.default_rng(1), (1000, 4))
    assert np.all(entropy(sharpen(p, 0.5)) <= entropy(p) + 1e-12)


def test_mix_lambda_folds_to_upper_half():
    rng = np.random.default_rng(0)
    draws = np.array([sample_mix_lambda(4.0, rng) for _ in range(10_000)])
    assert draws.min() >= 0.5
    assert 0.60 <= draws.mean() <= 0.66


def test_mix_pair_is_convex():
    rng = np.random.default_rng(2)
    x1, x2 = rng.random((4, 4)), rng.random((4, 4))
    p1, p2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    x, p, lam = mix_pair((x1, p1), (x2, p2), 4.0, seed=3)
    assert lam >= 0.5
    assert np.all(x >= np.minimum(x1, x2) - 1e-12) and np.all(x <= np.maximum(x1, x2) + 1e-12)
    np.testing.assert_allclose(p, [lam, 1 - lam])
    same, _, _ = mix_pair((x1, p1), (x1, p1), 4.0, seed=4)
    np.testing.assert_allclose(same, x1, rtol=1e-14)
    with pytest.raises(ShapeError):
        mix_pair((x1, p1), (x2[:2], p2), 4.0, seed=0)


def test_every_label_operation_stays_on_simplex():
    rng = np.random.default_rng(7)
    state = AlignmentState.create(5)
    for _ in range(200):
        y = np.eye(5)[rng.integers(5)]
        preds = random_simplex(rng, (2, 5))
        out = [
            co_refine(y, rng.random(), preds),
            co_guess(preds, random_simplex(rng, (2, 5))),
            align(random_simplex(rng, 5), state),
            sharpen(random_simplex(rng, 5), 0.5),
            mix_pair((y, y), (preds[0], preds[0]), 4.0, rng)[1],
        ]
        for p in out:
            assert np.all(p >= 0)
            assert p.sum() == pytest.approx(1.0, abs=1e-6)


def test_lambda_u_ramp():
    hyper = SslHyper()
    assert hyper.lambda_u_at(0) == 0.0
    assert hyper.lambda_u_at(8) == pytest.approx(12.5)
    assert hyper.lambda_u_at(40) == pytest.approx(25.0)


@pytest.mark.parametrize(
    "kwargs",
    [{"temperature": 0.0}, {"alpha": -1.0}, {"delta": -0.1}, {"alignment": "both"}, {"augmentations": 0}],
)
def test_hyper_validation(kwargs):
    with pytest.raises(DomainError):
        SslHyper(**kwargs)


class FixedLogits:
    def __init__(self, logits):
        self.logits = logits

    def forward_mixed(self, images, asc, asc_map, perm, lam):
        return Tensor(self.logits)


def hand_built_batch():
    rng = np.random.default_rng(3)
    targets = random_simplex(rng, (4, 3))
    batch = MixedBatch(
        images=np.zeros((4, 2, 2)), asc=np.zeros((4, 2, 7)), asc_map=np.arange(4),
        perm=np.arange(4), lam=1.0, targets=targets, num_labeled=2,
    )
    return batch, rng.standard_normal((4, 3))


def test_mixed_batch_loss_matches_direct_computation():
    batch, logits = hand_built_batch()
    total, lx, lu = mixed_batch_loss(FixedLogits(logits), batch, lambda_u=3.0)

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    expected_lx = -(log_p[:2] * batch.targets[:2]).sum(axis=1).mean()
    expected_lu = ((np.exp(log_p[2:]) - batch.targets[2:]) ** 2).mean()
    assert lx.item() == pytest.approx(expected_lx, rel=1e-6)
    assert lu.item() == pytest.approx(expected_lu, rel=1e-6)
    assert total.item() == pytest.approx(expected_lx + 3.0 * expected_lu, rel=1e-6)
    assert total.item() >= 0


def test_mixed_batch_loss_without_unsupervised_weight():
    batch, logits = hand_built_batch()
    total, lx, _ = mixed_batch_loss(FixedLogits(logits), batch, lambda_u=0.0)
    assert total.item() == lx.item()


def test_mse_sum_reduction_scales_by_class_count():
    batch, logits = hand_built_batch()
    _, _, mean = mixed_batch_loss(FixedLogits(logits), batch, 1.0, "mean")
    _, _, total = mixed_batch_loss(FixedLogits(logits), batch, 1.0, "sum")
    assert total.item() == pytest.approx(3 * mean.item())


def tiny_bank(n=8, num_classes=2):
    rng = np.random.default_rng(0)
    labels = np.arange(n) % num_classes
    return SampleBank(
        np.arange(n, dtype=np.int64), rng.random((n, 6, 7)).astype(np.float32),
        rng.random((n, 24, 24)).astype(np.float32), labels.copy(), labels.copy(),
    )


def tiny_branches(hyper):
    a = build_branch("A", 1, TINY_MODEL, 2, 16, hyper)
    b = build_branch("B", 2, TINY_MODEL, 2, 16, hyper)
    return a, b


def test_build_mixed_batch_layout():
    hyper = SslHyper()
    a, b = tiny_branches(hyper)
    bank = tiny_bank()
    b.net.eval()
    batch = build_mixed_batch(
        a.net, b.net, bank, np.array([0, 1, 2]), np.array([0.9, 0.8, 0.7]), np.array([5, 6]),
        hyper, a.alignment, SPEC, np.random.default_rng(0),
    )
    assert batch.num_labeled == 2 * 3
    assert batch.images.shape == (10, 16, 16)
    assert batch.asc.shape == (5, 6, 7)
    np.testing.assert_array_equal(batch.asc_map, [0, 1, 2, 0, 1, 2, 3, 4, 3, 4])
    np.testing.assert_allclose(batch.targets.sum(axis=1), 1.0, atol=1e-6)
    assert batch.lam >= 0.5
    assert a.net.training
    assert not b.net.training


def test_semi_supervised_step_trains_branch():
    hyper = SslHyper(rampup_epochs=4)
    a, b = tiny_branches(hyper)
    bank = tiny_bank()
    division = Division(
        np.arange(6), bank.train_labels[:6], np.full(6, 0.9), np.array([6, 7]), 0.6, producer="B"
    )
    settings = StepSettings(0.02, 0.9, 5e-4, 4, 16, SPEC)
    before = a.net.head.weight.data.copy()
    peer_before = b.net.head.weight.data.copy()
    losses = semi_supervised_step(a, b.net, bank, division, hyper, settings, progress=0.5)
    assert losses.steps == 2
    assert (losses.num_clean, losses.num_noisy) == (6, 2)
    assert losses.lambda_u == pytest.approx(25.0 * 1.0 / 4)
    assert np.isfinite(losses.ce) and losses.ce >= 0
    assert not np.array_equal(a.net.head.weight.data, before)
    np.testing.assert_array_equal(b.net.head.weight.data, peer_before)
    np.testing.assert_allclose(a.alignment.clean_marginal, [3 / 8, 3 / 8])


def test_warm_up_is_deterministic():
    hyper = SslHyper()
    bank = tiny_bank()
    settings = StepSettings(0.02, 0.9, 5e-4, 4, 16, SPEC)
    runs = []
    for _ in range(2):
        branch, _ = tiny_branches(hyper)
        runs.append(warm_up(branch, bank, settings, epochs=2))
    assert len(runs[0]) == 2
    assert runs[0] == runs[1]
