"""Co-training loop: warm-up, cross division, semi-supervised updates, evaluation.

Each epoch after warm-up both branches divide the training set with their
own losses; branch A then trains on B's division and B on A's.
"""

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from sanran.checkpoint import save_checkpoint
from sanran.dataset import NoiseAudit, SampleBank
from sanran.divide import (
    Division,
    LossLedger,
    divide,
    division_metrics,
    fit_class_mixtures,
    per_sample_losses,
)
from sanran.errors import DataError, DomainError
from sanran.features import AscScaler, FusionNet, ModelConfig, build_network
from sanran.log import NullLogger, RunLogger
from sanran.report import (
    DIVISION_COLUMNS,
    TRAINING_LOG_COLUMNS,
    CsvAppender,
    EpochRecord,
    RunReport,
)
from sanran.ssl import (
    AlignmentState,
    SslHyper,
    StepSettings,
    cross_entropy_epoch,
    semi_supervised_step,
)

if TYPE_CHECKING:
    from sanran.config import ExperimentConfig

log = logging.getLogger(__name__)

METHODS = ("clsdf", "ce")


@dataclass(frozen=True)
class Schedule:
    total_epochs: int = 60
    warm_up_epochs: int = 5
    batch_size: int = 16
    eval_batch_size: int = 64
    lr: float = 0.02
    lr_decay_epoch: int | None = None  # default: total_epochs // 2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    branch_seeds: tuple[int, int] = (1, 2)
    parallel: bool = False
    checkpoint_every: int = 10

    def __post_init__(self) -> None:
        if self.total_epochs < 1 or self.warm_up_epochs < 0:
            raise DomainError("schedule needs total_epochs >= 1 and warm_up_epochs >= 0")
        if self.batch_size < 1 or self.lr <= 0:
            raise DomainError("schedule needs batch_size >= 1 and lr > 0")
        if len(self.branch_seeds) != 2 or self.branch_seeds[0] == self.branch_seeds[1]:
            raise DomainError("branch_seeds must be two different integers")

    def lr_at(self, epoch: int) -> float:
        decay = self.lr_decay_epoch if self.lr_decay_epoch is not None else self.total_epochs // 2
        return self.lr * (0.5 if epoch >= decay else 1.0)


@dataclass
class BranchState:
    name: str
    net: FusionNet
    alignment: AlignmentState
    rng: np.random.Generator
    seed: int
    epoch: int = 0


def build_branch(
    name: str, seed: int, model: ModelConfig, num_classes: int, input_size: int,
    hyper: SslHyper, target: np.ndarray | None = None,
) -> BranchState:
    """Fresh branch: network from `seed`, batches and augmentation from a derived stream."""
    net = build_network(model, num_classes, seed, input_size)
    rng = np.random.default_rng([seed, 1])
    alignment = AlignmentState.create(num_classes, target, hyper.ema_momentum)
    return BranchState(name, net, alignment, rng, seed)


def target_marginal(hyper: SslHyper, bank: SampleBank, num_classes: int) -> np.ndarray:
    if hyper.target_marginal == "empirical":
        return np.bincount(bank.train_labels, minlength=num_classes) / len(bank)
    return np.full(num_classes, 1.0 / num_classes)


@dataclass
class Evaluation:
    accuracy: float
    per_branch: list[float]
    confusion: np.ndarray  # rows: true class, cols: predicted
    probabilities: np.ndarray = field(repr=False, default=None)


def evaluate(
    nets: list[FusionNet], bank: SampleBank, crop_size: int, batch_size: int = 64
) -> Evaluation:
    """Accuracy of the mean softmax over all nets, plus each net alone."""
    images = bank.center_crops(crop_size)
    modes = [net.training for net in nets]
    probs = []
    try:
        for net in nets:
            net.eval()
            probs.append(net.predict_proba(images, bank.asc, batch_size))
    finally:
        for net, mode in zip(nets, modes):
            net.train(mode)
    mean = np.mean(probs, axis=0)
    num_classes = mean.shape[1]
    pred = mean.argmax(axis=1)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (bank.true_labels, pred), 1)
    per_branch = [float((p.argmax(axis=1) == bank.true_labels).mean()) for p in probs]
    return Evaluation(float((pred == bank.true_labels).mean()), per_branch, confusion, mean)


class CoTrainer:
    def __init__(
        self,
        config: "ExperimentConfig",
        train_bank: SampleBank,
        test_bank: SampleBank,
        audit: NoiseAudit,
        run_dir: Path | None = None,
    ):
        overlap = set(train_bank.ids.tolist()) & set(test_bank.ids.tolist())
        if overlap:
            raise DataError(f"{len(overlap)} test samples leak into the training set")
        if config.baseline not in METHODS:
            raise DomainError(f"unknown method {config.baseline!r}")
        self.config = config
        self.schedule: Schedule = config.schedule
        self.hyper: SslHyper = config.ssl
        self.num_classes = config.data.num_classes
        self.crop = config.augment.crop_size
        self.audit = audit

        self.scaler = AscScaler.fit(train_bank.asc)
        self.train_bank = train_bank.with_asc(self.scaler.transform(train_bank.asc))
        self.test_bank = test_bank.with_asc(self.scaler.transform(test_bank.asc))

        self.run_dir = Path(run_dir) if run_dir else None
        if self.run_dir:
            # A run directory always describes exactly one run
            self.logger = RunLogger(self.run_dir, fresh=True)
            self.training_log = CsvAppender(
                self.run_dir / "training_log.csv", TRAINING_LOG_COLUMNS, fresh=True
            )
            self.division_log = CsvAppender(
                self.run_dir / "division.csv", DIVISION_COLUMNS, fresh=True
            )
            for stale in (self.run_dir / "checkpoints").glob("*.ckpt"):
                stale.unlink()
        else:
            self.logger = NullLogger()
            self.training_log = self.division_log = None
        self.max_workers = config.concurrency.max_workers

        target = target_marginal(self.hyper, self.train_bank, self.num_classes)
        names = ["A", "B"] if config.baseline == "clsdf" else ["A"]
        self.branches = [
            build_branch(name, seed, config.model, self.num_classes, self.crop, self.hyper, target)
            for name, seed in zip(names, self.schedule.branch_seeds)
        ]
        self.report = RunReport(method=config.baseline)

    # --- public ---

    def run(self) -> RunReport:
        started = time.monotonic()
        self.logger.config(self.config.to_dict())
        self.save_checkpoint("init.ckpt", epoch=-1)
        evaluation = None
        try:
            for epoch in range(self.schedule.total_epochs):
                row = self.run_epoch(epoch)
                evaluation = evaluate(
                    [b.net for b in self.branches], self.test_bank, self.crop,
                    self.schedule.eval_batch_size,
                )
                row["test_accuracy"] = evaluation.accuracy
                for branch, acc in zip(self.branches, evaluation.per_branch):
                    row[f"accuracy_{branch.name.lower()}"] = acc
                record = EpochRecord(**row)
                self.report.add_epoch(record)
                self.logger.evaluation(epoch, evaluation.accuracy, per_branch=evaluation.per_branch)
                self._log_training(record)
                log.info(
                    "epoch %d/%d  %s  acc=%.4f",
                    epoch + 1, self.schedule.total_epochs, record.phase, evaluation.accuracy,
                )

                every = self.schedule.checkpoint_every
                last = epoch == self.schedule.total_epochs - 1
                if last or (every and (epoch + 1) % every == 0):
                    self.save_checkpoint(f"epoch-{epoch + 1:03d}.ckpt", epoch)
        finally:
            self.logger.close()

        self.report.confusion = evaluation.confusion.tolist()
        self.report.wall_clock = time.monotonic() - started
        if self.run_dir:
            self.report.write(self.run_dir)
        return self.report

    def run_epoch(self, epoch: int) -> dict:
        """Train one epoch and return the curve fields it produced."""
        settings = self.settings(epoch)
        for branch in self.branches:
            branch.epoch = epoch
        if self.config.baseline == "ce":
            return self._ce_epoch(epoch, settings)
        if epoch < self.schedule.warm_up_epochs:
            return self._warm_up_epoch(epoch, settings)
        return self._ssl_epoch(epoch, settings)

    def settings(self, epoch: int) -> StepSettings:
        s = self.schedule
        return StepSettings(
            s.lr_at(epoch), s.momentum, s.weight_decay, s.batch_size, self.crop, self.config.augment
        )

    def divide_with(self, branch: BranchState, epoch: int) -> tuple[Division, LossLedger, dict]:
        ledger = per_sample_losses(
            branch.net, self.train_bank, self.crop, self.schedule.eval_batch_size
        )
        gmms = fit_class_mixtures(ledger, self.hyper.class_wise)
        division = divide(ledger, gmms, self.hyper.delta, producer=branch.name, epoch=epoch)
        return division, ledger, gmms

    def save_checkpoint(self, name: str, epoch: int) -> Path | None:
        if not self.run_dir:
            return None
        tensors = {}
        for branch in self.branches:
            prefix = branch.name.lower()
            tensors.update({f"{prefix}.{k}": v for k, v in branch.net.state_dict().items()})
        tensors.update({f"scaler.{k}": v for k, v in self.scaler.state_dict().items()})
        path = save_checkpoint(
            self.run_dir / "checkpoints" / name, tensors, meta=self.config.to_yaml()
        )
        self.logger.checkpoint(path, epoch)
        return path

    # --- epoch kinds ---

    def _ce_epoch(self, epoch: int, settings: StepSettings) -> dict:
        branch = self.branches[0]
        augmented = epoch >= self.schedule.warm_up_epochs
        loss = cross_entropy_epoch(branch, self.train_bank, settings, augmented=augmented)
        self.logger.log("ce_epoch", branch=branch.name, epoch=epoch, loss=loss, augmented=augmented)
        return {"epoch": epoch, "phase": "ce", "lr": settings.lr, "ce_a": loss}

    def _warm_up_epoch(self, epoch: int, settings: StepSettings) -> dict:
        row = {"epoch": epoch, "phase": "warm_up", "lr": settings.lr, "lambda_u": 0.0}
        for branch in self.branches:
            loss = cross_entropy_epoch(branch, self.train_bank, settings)
            self.logger.warm_up_epoch(branch.name, epoch, loss)
            row[f"ce_{branch.name.lower()}"] = loss
        return row

    def _ssl_epoch(self, epoch: int, settings: StepSettings) -> dict:
        progress = epoch - self.schedule.warm_up_epochs
        row = {"epoch": epoch, "phase": "ssl", "lr": settings.lr}
        divisions = {}
        for branch in self.branches:
            division, _, gmms = self.divide_with(branch, epoch)
            self._record_division(branch, division, gmms, epoch, row)
            divisions[branch.name] = division

        a, b = self.branches
        jobs = [(a, b, divisions[b.name]), (b, a, divisions[a.name])]
        for consumer, producer, _ in jobs:
            self.report.provenance.append(
                {"epoch": epoch, "consumer": consumer.name, "producer": producer.name}
            )
            self.logger.division_consumed(consumer.name, producer.name, epoch)

        if self.schedule.parallel:
            # Each branch sees a frozen copy of its peer as it was at the start of the epoch
            snapshots = {branch.name: copy.deepcopy(branch.net) for branch in self.branches}
            with ThreadPoolExecutor(max_workers=max(1, min(2, self.max_workers))) as pool:
                futures = [
                    pool.submit(semi_supervised_step, c, snapshots[p.name], self.train_bank, d,
                                self.hyper, settings, progress)
                    for c, p, d in jobs
                ]
                results = [f.result() for f in futures]
        else:
            results = [
                semi_supervised_step(c, p.net, self.train_bank, d, self.hyper, settings, progress)
                for c, p, d in jobs
            ]

        for (consumer, _, _), losses in zip(jobs, results):
            key = consumer.name.lower()
            row[f"ce_{key}"] = losses.ce
            row[f"mse_{key}"] = losses.mse
            row[f"clean_{key}"] = losses.num_clean
            row[f"noisy_{key}"] = losses.num_noisy
            row["lambda_u"] = losses.lambda_u
            self.logger.ssl_epoch(
                consumer.name, epoch, ce=losses.ce, mse=losses.mse, lambda_u=losses.lambda_u,
                num_clean=losses.num_clean, num_noisy=losses.num_noisy,
            )
        return row

    # --- bookkeeping ---

    def _record_division(
        self, branch: BranchState, division: Division, gmms: dict, epoch: int, row: dict
    ) -> None:
        accuracy, error = division_metrics(division, self.audit)
        key = branch.name.lower()
        row[f"division_accuracy_{key}"] = accuracy
        row[f"division_error_{key}"] = error
        self.logger.division(
            branch.name, epoch, division.num_clean, division.num_noisy, accuracy, error
        )
        if self.division_log is None:
            return
        counts = division.clean_counts(self.num_classes)
        for class_id, gmm in gmms.items():
            acc_c, err_c = division_metrics(division, self.audit, class_id)
            self.division_log.append(
                epoch=epoch, branch=branch.name,
                **{"class": "all" if class_id is None else class_id},
                num_clean=division.num_clean if class_id is None else int(counts[class_id]),
                division_accuracy=acc_c, division_error=err_c, **gmm.to_dict(),
            )

    def _log_training(self, record: EpochRecord) -> None:
        if self.training_log is None:
            return
        for branch in self.branches:
            key = branch.name.lower()
            self.training_log.append(
                epoch=record.epoch, branch=branch.name, phase=record.phase,
                ce=getattr(record, f"ce_{key}"), mse=getattr(record, f"mse_{key}"),
                lambda_u=record.lambda_u, num_clean=getattr(record, f"clean_{key}"),
                num_noisy=getattr(record, f"noisy_{key}"), test_accuracy=record.test_accuracy,
            )


def run(
    config: "ExperimentConfig", train_bank: SampleBank, test_bank: SampleBank, audit: NoiseAudit,
    run_dir: Path | None = None,
) -> RunReport:
    return CoTrainer(config, train_bank, test_bank, audit, run_dir).run()


def load_branches(
    tensors: dict[str, np.ndarray], config: "ExperimentConfig"
) -> tuple[list[FusionNet], AscScaler]:
    """Rebuild the networks and the ASC scaler stored by CoTrainer.save_checkpoint."""
    nets = []
    for prefix in ("a", "b"):
        state = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        if not state:
            continue
        net = build_network(config.model, config.data.num_classes, 0, config.augment.crop_size)
        net.load_state_dict(state)
        nets.append(net)
    if not nets or "scaler.low" not in tensors:
        raise DataError("checkpoint holds no trained branches")
    scaler = AscScaler.from_state({"low": tensors["scaler.low"], "high": tensors["scaler.high"]})
    return nets, scaler
