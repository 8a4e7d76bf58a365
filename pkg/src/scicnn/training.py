"""Momentum SGD training, evaluation, cross-validation and ablation sweeps.

Seed derivation: a run with master seed ``s`` assigns folds with ``Rng(s)``
and trains round ``k`` with ``Rng(s).fork(k + 1)``, i.e. seed ``s + k + 1``.
That one generator drives weight init, shuffling and dropout masks for the
round, so rounds are independent of each other and of execution order.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import (FoldAssignment, PatchDataset, channel_means, class_names, normalize,
                   split_by_image)
from .errors import ConfigError, DivergenceError, EvaluationError
from .layers import softmax_cross_entropy
from .model import DEFAULT_FILTERS, ArchitectureConfig, Network, build_network, save_checkpoint
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    lr_decay: float = 0.5
    lr_decay_every: int = 10

    def validate(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1 or self.lr_decay_every < 1:
            raise ConfigError("batch_size, epochs and lr_decay_every must be >= 1")
        if not self.lr_decay > 0:
            raise ConfigError(f"lr_decay must be > 0, got {self.lr_decay}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


class SGD:
    """Heavy-ball momentum: ``v <- mu * v - lr * g``, ``p <- p + v``."""

    def __init__(self, net: Network, momentum: float = 0.9):
        self.net = net
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for _, p in net.param_items()]

    def step(self, lr: float):
        mu = self.momentum
        for v, (_, p), (_, g) in zip(self.velocity, self.net.param_items(), self.net.grad_items()):
            v *= mu
            v -= lr * g
            p += v


def train_fold(net: Network, train: PatchDataset, cfg: TrainConfig, rng: Rng) -> Network:
    """Train ``net`` in place; per-epoch mean losses go to ``net.metadata['loss_history']``."""
    cfg.validate()
    if len(train) == 0:
        raise ConfigError("training set is empty")
    if train.num_classes != net.num_classes:
        raise ConfigError(f"network has {net.num_classes} outputs but the dataset has "
                          f"{train.num_classes} classes")
    opt = SGD(net, cfg.momentum)
    history = []
    n = len(train)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits = net.logits(train.pixels[idx], training=True, rng=rng)
            _, loss, grad = softmax_cross_entropy(logits, train.labels[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            net.backward(grad)
            opt.step(lr)
            total += loss * len(idx)
        history.append(total / n)
        log.debug("epoch %d lr %.4g loss %.5f", epoch, lr, history[-1])
    net.clear_caches()
    net.metadata["loss_history"] = history
    return net


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @classmethod
    def from_predictions(cls, labels, preds, names) -> "ConfusionMatrix":
        n = len(names)
        counts = np.zeros((n, n), np.int64)
        np.add.at(counts, (np.asarray(labels), np.asarray(preds)), 1)
        return cls(counts, tuple(names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def precision(self) -> list[float | None]:
        col = self.counts.sum(axis=0)
        return [float(self.counts[i, i] / c) if c else None for i, c in enumerate(col)]

    def recall(self) -> list[float | None]:
        row = self.counts.sum(axis=1)
        return [float(self.counts[i, i] / r) if r else None for i, r in enumerate(row)]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    def to_csv(self) -> str:
        lines = ["true\\pred," + ",".join(self.class_names)]
        for name, row in zip(self.class_names, self.counts):
            lines.append(name + "," + ",".join(str(int(c)) for c in row))
        return "\n".join(lines) + "\n"


def predict(net: Network, ds: PatchDataset, batch_size: int = 512) -> np.ndarray:
    preds = [net.logits(ds.pixels[i:i + batch_size]).argmax(axis=1)
             for i in range(0, len(ds), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def evaluate(net: Network, test: PatchDataset) -> tuple[float, ConfusionMatrix]:
    if len(test) == 0:
        raise EvaluationError("test set is empty")
    if test.num_classes != net.num_classes:
        raise ConfigError(f"network has {net.num_classes} outputs but the dataset has "
                          f"{test.num_classes} classes")
    cm = ConfusionMatrix.from_predictions(test.labels, predict(net, test), test.class_names)
    return cm.accuracy, cm


def image_vote_accuracy(preds, ds: PatchDataset) -> float:
    """Per-image majority vote over patch predictions; ties go to the lower class index."""
    votes: dict[str, np.ndarray] = {}
    truth: dict[str, int] = {}
    for p, y, s in zip(preds, ds.labels, ds.source_ids):
        votes.setdefault(s, np.zeros(ds.num_classes, np.int64))[p] += 1
        truth[s] = int(y)
    if not votes:
        raise EvaluationError("test set is empty")
    return float(np.mean([int(v.argmax()) == truth[s] for s, v in votes.items()]))


@dataclass
class ExperimentReport:
    label_mode: str
    class_names: tuple[str, ...]
    fold_accuracies: list[float]
    confusion_matrix: ConfusionMatrix
    fold_confusion_matrices: list[ConfusionMatrix]
    architecture: dict
    training: dict
    data: dict
    seed: int
    fold_assignment_hash: str
    vote_accuracies: list[float] | None = None
    loss_histories: list[list[float]] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    def to_dict(self, include_timings: bool = True) -> dict:
        cm = self.confusion_matrix
        out = {
            "label_mode": self.label_mode,
            "class_names": list(self.class_names),
            "fold_accuracies": self.fold_accuracies,
            "mean_accuracy": self.mean_accuracy,
            "accuracy_granularity": "patch",
            "confusion_matrix": cm.counts.tolist(),
            "fold_confusion_matrices": [c.counts.tolist() for c in self.fold_confusion_matrices],
            "per_class_precision": cm.precision(),
            "per_class_recall": cm.recall(),
            "configs": {"architecture": self.architecture, "training": self.training, "data": self.data},
            "seed": self.seed,
            "fold_assignment_hash": self.fold_assignment_hash,
            "loss_histories": self.loss_histories,
        }
        if self.vote_accuracies is not None:
            out["image_vote_fold_accuracies"] = self.vote_accuracies
            out["image_vote_mean_accuracy"] = float(np.mean(self.vote_accuracies))
        if include_timings:
            out["timings"] = self.timings
        return out

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True) + "\n"


def prepare_round(records, assignment: FoldAssignment, k: int, label_mode: str):
    """Patch datasets for round ``k`` normalized with training-fold channel means."""
    train_recs, test_recs = assignment.split(records, k)
    train = PatchDataset.from_records(train_recs, label_mode)
    test = PatchDataset.from_records(test_recs, label_mode)
    means = channel_means(train)
    return normalize(train, means), normalize(test, means), means, test_recs


def cross_validate(records, label_mode: str, arch_cfg: ArchitectureConfig, train_cfg: TrainConfig,
                   folds: int = 10, rounds: int | None = None, assignment: FoldAssignment | None = None,
                   checkpoint_dir=None, vote: bool = False, on_round=None) -> ExperimentReport:
    """Train and test once per fold; ``rounds`` limits how many folds are used as test sets.

    ``rounds=1`` is a single 90/10 image-level split when ``folds=10``.
    """
    names = class_names(label_mode)
    arch_cfg = replace(arch_cfg, num_classes=len(names))
    train_cfg.validate()
    if assignment is None:
        assignment = split_by_image(records, folds, Rng(train_cfg.seed), label_mode)
    n_rounds = assignment.n_folds if rounds is None else min(rounds, assignment.n_folds)
    master = Rng(train_cfg.seed)
    accs, cms, votes, histories, times = [], [], [], [], []
    t_all = time.perf_counter()
    for k in range(n_rounds):
        t0 = time.perf_counter()
        train, test, means, test_recs = prepare_round(records, assignment, k, label_mode)
        rng = master.fork(k + 1)
        net = build_network(arch_cfg, rng)
        train_fold(net, train, train_cfg, rng)
        net.metadata.update({"label_mode": label_mode, "class_names": list(names),
                             "channel_means": [float(m) for m in means], "fold": k})
        acc, cm = evaluate(net, test)
        accs.append(acc)
        cms.append(cm)
        histories.append(net.metadata["loss_history"])
        if vote:
            votes.append(image_vote_accuracy(predict(net, test), test))
        if checkpoint_dir is not None:
            save_checkpoint(net, f"{checkpoint_dir}/fold_{k:02d}.ckpt")
        if on_round is not None:
            on_round(k, net, test_recs)
        times.append(time.perf_counter() - t0)
        log.info("round %d/%d: accuracy %.4f (%.1fs)", k + 1, n_rounds, acc, times[-1])
    total = cms[0]
    for cm in cms[1:]:
        total = total + cm
    return ExperimentReport(
        label_mode=label_mode, class_names=names, fold_accuracies=accs, confusion_matrix=total,
        fold_confusion_matrices=cms, architecture=arch_cfg.to_dict(), training=asdict(train_cfg),
        data={"images": len(records), "folds": assignment.n_folds, "rounds": n_rounds},
        seed=train_cfg.seed, fold_assignment_hash=assignment.digest(),
        vote_accuracies=votes if vote else None, loss_histories=histories,
        timings={"round_seconds": times, "total_seconds": time.perf_counter() - t_all},
    )


SWEEPS = {
    "topology": [1, 2, 4],
    "activation": ["relu", "leaky_relu"],
    "dropout": [0.35, 0.45, 0.5, 0.55],
}


def sweep_variant(sweep: str, value, base: ArchitectureConfig) -> ArchitectureConfig:
    if sweep == "topology":
        return replace(base, filters=list(DEFAULT_FILTERS[value]))
    if sweep == "activation":
        return replace(base, activation=value)
    if sweep == "dropout":
        return replace(base, dropout_keep=value)
    raise ConfigError(f"unknown sweep {sweep!r}; choose from {sorted(SWEEPS)}")


@dataclass
class AblationResult:
    sweep: str
    variant: object
    report: ExperimentReport | None
    error: str | None = None

    def row(self) -> dict:
        return {"sweep": self.sweep, "variant": self.variant,
                "mean_accuracy": self.report.mean_accuracy if self.report else None,
                "fold_assignment_hash": self.report.fold_assignment_hash if self.report else None,
                "error": self.error}


def run_ablation(sweep: str, records, label_mode: str, base_arch: ArchitectureConfig,
                 base_train: TrainConfig, folds: int = 10, rounds: int | None = None,
                 values=None) -> list[AblationResult]:
    """One cross-validation report per variant, all on the same fold assignment."""
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; choose from {sorted(SWEEPS)}")
    assignment = split_by_image(records, folds, Rng(base_train.seed), label_mode)
    results = []
    for value in (SWEEPS[sweep] if values is None else values):
        try:
            cfg = sweep_variant(sweep, value, base_arch)
            build_network(replace(cfg, num_classes=len(class_names(label_mode))), None)
        except (ConfigError, KeyError) as exc:
            log.warning("skipping %s=%s: %s", sweep, value, exc)
            results.append(AblationResult(sweep, value, None, str(exc)))
            continue
        report = cross_validate(records, label_mode, cfg, base_train, folds, rounds, assignment)
        results.append(AblationResult(sweep, value, report))
    return results


def summary_csv(results: list[AblationResult]) -> str:
    lines = ["sweep,variant,mean_accuracy,fold_assignment_hash,error"]
    for r in results:
        row = r.row()
        acc = "" if row["mean_accuracy"] is None else f"{row['mean_accuracy']:.6f}"
        lines.append(f"{r.sweep},{r.variant},{acc},{row['fold_assignment_hash'] or ''},"
                     f"{(row['error'] or '').replace(',', ';')}")
    return "\n".join(lines) + "\n"
