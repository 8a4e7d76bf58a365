import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scicnn.data import PatchDataset, SENSORS, generate_synthetic, make_camera_specs, split_by_image
from scicnn.errors import ConfigError, DivergenceError, EvaluationError
from scicnn.layers import softmax_cross_entropy
from scicnn.model import ArchitectureConfig, build_network, checkpoint_bytes
from scicnn.tensor import Rng
from scicnn.training import (ConfusionMatrix, TrainConfig, cross_validate, evaluate,
                             image_vote_accuracy, predict, run_ablation, summary_csv, train_fold)

SMALL = ArchitectureConfig(num_classes=5, filters=[4, 8], fc_sizes=[16, 16])


def synthetic_ds(n_classes=5, per_class=4, sigma_f=0.05, size=64, seed=0, mode="sensor"):
    rng = Rng(seed)
    recs = generate_synthetic(make_camera_specs(n_classes, rng, sigma_f=sigma_f), per_class, rng, size, size)
    return recs, PatchDataset.from_records(recs, mode)


@pytest.fixture(scope="module")
def small_records():
    return synthetic_ds(per_class=10, size=32)[0]


def params_of(net):
    return [a.copy() for _, a in net.param_items()]


def test_zero_learning_rate_leaves_parameters():
    _, ds = synthetic_ds()
    net = build_network(SMALL, Rng(0))
    before = params_of(net)
    train_fold(net, ds, TrainConfig(learning_rate=0.0, epochs=2, batch_size=16), Rng(1))
    assert all(np.array_equal(a, b) for a, b in zip(before, params_of(net)))


def test_loss_decreases_on_separable_toy():
    recs, ds = synthetic_ds(n_classes=2, per_class=16, sigma_f=0.3, seed=4)
    net = build_network(ArchitectureConfig(num_classes=5), Rng(2))
    train_fold(net, ds, TrainConfig(epochs=5, batch_size=16), Rng(3))
    hist = net.metadata["loss_history"]
    assert all(b < a for a, b in zip(hist, hist[1:])), hist


def test_training_is_bitwise_deterministic():
    _, ds = synthetic_ds()
    blobs = []
    for _ in range(2):
        net = build_network(SMALL, Rng(7))
        train_fold(net, ds, TrainConfig(epochs=2, batch_size=8), Rng(8))
        blobs.append(checkpoint_bytes(net))
    assert blobs[0] == blobs[1]


def test_zero_momentum_equals_vanilla_sgd():
    _, ds = synthetic_ds()
    cfg = TrainConfig(epochs=2, batch_size=8, momentum=0.0, learning_rate=0.05, lr_decay_every=1)
    net = build_network(SMALL, Rng(9))
    train_fold(net, ds, cfg, Rng(10))

    ref = build_network(SMALL, Rng(9))
    rng = Rng(10)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        order = rng.permutation(len(ds))
        for start in range(0, len(ds), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = ref.logits(ds.pixels[idx], training=True, rng=rng)
            ref.backward(softmax_cross_entropy(logits, ds.labels[idx])[2])
            for (_, p), (_, g) in zip(ref.param_items(), ref.grad_items()):
                p -= lr * g
    for (_, a), (_, b) in zip(net.param_items(), ref.param_items()):
        assert a.tobytes() == b.tobytes()


def test_class_count_mismatch():
    _, ds = synthetic_ds()
    net = build_network(ArchitectureConfig(num_classes=3), Rng(0))
    with pytest.raises(ConfigError):
        train_fold(net, ds, TrainConfig(epochs=1), Rng(0))
    with pytest.raises(ConfigError):
        evaluate(net, ds)


def test_divergence_is_reported():
    _, ds = synthetic_ds()
    net = build_network(SMALL, Rng(0))
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as err:
        train_fold(net, ds, TrainConfig(learning_rate=1e30, momentum=0.0, epochs=3, batch_size=8), Rng(0))
    assert err.value.epoch is not None and err.value.batch is not None


def test_constant_predictor():
    rng = Rng(0)
    recs = generate_synthetic(make_camera_specs(3, rng), 2, rng, 32, 32)
    ds = PatchDataset.from_records(recs, "model")  # IP5, IP5, SG4 -> remap to balanced below
    ds.labels[:] = np.repeat([0, 1, 2], 2)
    net = build_network(ArchitectureConfig(num_classes=3), Rng(1))
    fc3 = net.layer("fc3")
    fc3.params["weights"][...] = 0
    fc3.params["bias"][...] = [10, 0, 0]
    acc, cm = evaluate(net, ds)
    assert acc == pytest.approx(1 / 3)
    assert cm.counts[:, 0].tolist() == [2, 2, 2] and cm.counts[:, 1:].sum() == 0


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 1])
    cm = ConfusionMatrix.from_predictions(labels, labels, ("a", "b", "c"))
    assert cm.accuracy == 1.0
    assert np.array_equal(cm.counts, np.diag(np.diag(cm.counts)))


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=200))
def test_accuracy_is_trace_over_total(pairs):
    y, p = zip(*pairs)
    cm = ConfusionMatrix.from_predictions(y, p, tuple("abcd"))
    assert cm.total == len(pairs)
    assert cm.accuracy == np.trace(cm.counts) / cm.total


def test_empty_test_set():
    net = build_network(SMALL, Rng(0))
    empty = PatchDataset.from_patches([], "sensor")
    with pytest.raises(EvaluationError):
        evaluate(net, empty)


def test_image_vote():
    ds = PatchDataset(np.zeros((6, 3, 32, 32), np.float32), np.array([0, 0, 0, 1, 1, 1]),
                      np.array(["a", "a", "a", "b", "b", "b"], object), "sensor")
    assert image_vote_accuracy(np.array([0, 0, 1, 0, 0, 1]), ds) == 0.5


def test_cross_validate_invariants(small_records):
    report = cross_validate(small_records, "sensor", SMALL, TrainConfig(epochs=1, batch_size=16, seed=3),
                            vote=True)
    assert len(report.fold_accuracies) == 10
    assert abs(np.mean(report.fold_accuracies) - report.mean_accuracy) < 1e-12
    total = len(PatchDataset.from_records(small_records, "sensor"))
    assert report.confusion_matrix.total == total
    assert sum(cm.total for cm in report.fold_confusion_matrices) == total
    for acc, cm in zip(report.fold_accuracies, report.fold_confusion_matrices):
        assert acc == cm.accuracy
    doc = json.loads(report.to_json())
    for key in ("fold_accuracies", "mean_accuracy", "confusion_matrix", "configs", "seed", "timings",
                "per_class_precision", "per_class_recall", "image_vote_mean_accuracy"):
        assert key in doc
    assert "timings" not in json.loads(report.to_json(include_timings=False))


def test_fold_exclusivity(small_records):
    fa = split_by_image(small_records, 10, Rng(3))
    seen = {}

    def record_round(k, net, test_recs):
        seen[k] = {r.image_id for r in test_recs}

    cross_validate(small_records, "sensor", SMALL, TrainConfig(epochs=1, seed=3), rounds=3,
                   on_round=record_round)
    assert seen == {k: fa.test_ids(k) for k in range(3)}


def test_model_level_report_uses_three_classes(small_records):
    report = cross_validate(small_records, "model", SMALL, TrainConfig(epochs=1, seed=1), rounds=1)
    assert report.class_names == ("IP5", "SG4", "SGT2")
    assert report.architecture["num_classes"] == 3


@pytest.mark.parametrize("sweep,n", [("dropout", 4), ("topology", 3), ("activation", 2)])
def test_ablation_sweeps(small_records, sweep, n):
    results = run_ablation(sweep, small_records, "sensor", SMALL, TrainConfig(epochs=1, seed=2), rounds=1)
    assert len(results) == n and all(r.report is not None for r in results)
    assert len({r.report.fold_assignment_hash for r in results}) == 1
    assert len(summary_csv(results).strip().splitlines()) == n + 1


def test_ablation_continues_past_unbuildable_variant(small_records):
    results = run_ablation("topology", small_records, "sensor", SMALL, TrainConfig(epochs=1), rounds=1,
                           values=[3, 1])
    assert results[0].report is None and results[0].error
    assert results[1].report is not None


def test_unknown_sweep(small_records):
    with pytest.raises(ConfigError):
        run_ablation("optimizer", small_records, "sensor", SMALL, TrainConfig())
