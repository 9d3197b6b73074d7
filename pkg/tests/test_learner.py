import gzip
import math

import numpy as np
import pytest

from gradcheck import max_relative_error
from hhefl.errors import FormatError, ParameterError, TrainingDiverged
from hhefl.learner import (
    IDX_IMAGES,
    IDX_LABELS,
    Dataset,
    TrainConfig,
    classification_metrics,
    cross_entropy,
    evaluate,
    forward,
    init_model,
    load_idx,
    model_shapes,
    partition_iid,
    read_idx,
    softmax,
    synthetic,
    train_local,
    write_idx,
)


@pytest.fixture
def idx_fixture(tmp_path):
    images = np.arange(4 * 28 * 28, dtype=np.int64).reshape(4, 28, 28) % 256
    labels = np.array([3, 1, 4, 1])
    write_idx(tmp_path / "img", images, IDX_IMAGES)
    write_idx(tmp_path / "lbl", labels, IDX_LABELS)
    return tmp_path, images, labels


def test_idx_roundtrip(idx_fixture):
    path, images, labels = idx_fixture
    raw = (path / "img").read_bytes()
    assert raw[:4] == bytes([0, 0, 8, 3]) and raw[4:8] == (4).to_bytes(4, "big")
    ds = load_idx(path / "img", path / "lbl")
    assert len(ds) == 4 and ds.features == 784
    assert np.allclose(ds.images * 255, images.reshape(4, -1))
    assert ds.labels.tolist() == labels.tolist()
    assert ds.images.max() <= 1.0


def test_idx_gzip(idx_fixture):
    path, images, _ = idx_fixture
    (path / "img.gz").write_bytes(gzip.compress((path / "img").read_bytes()))
    assert np.array_equal(read_idx(path / "img.gz", IDX_IMAGES), images)


def test_idx_errors(idx_fixture):
    path, _, _ = idx_fixture
    with pytest.raises(FormatError):
        load_idx(path / "lbl", path / "lbl")
    data = (path / "img").read_bytes()
    (path / "short").write_bytes(data[:-1])
    with pytest.raises(FormatError):
        read_idx(path / "short", IDX_IMAGES)
    (path / "tiny").write_bytes(data[:5])
    with pytest.raises(FormatError):
        read_idx(path / "tiny", IDX_IMAGES)
    write_idx(path / "lbl3", np.array([1, 2, 3]), IDX_LABELS)
    with pytest.raises(FormatError):
        load_idx(path / "img", path / "lbl3")


def test_dataset_invariants():
    with pytest.raises(ParameterError):
        Dataset(np.zeros((3, 2), dtype=np.float32), np.zeros(2, dtype=np.int64))
    with pytest.raises(ParameterError):
        Dataset(np.zeros((1, 2), dtype=np.float32), np.array([10]))


def test_partition_sizes_and_disjointness():
    ds = synthetic(60000, features=4, seed=0)
    plan = partition_iid(ds, 12, seed=1)
    assert len(plan) == 12
    assert all(len(s.indices) == 5000 for s in plan.shards)
    everything = np.concatenate([s.indices for s in plan.shards])
    assert np.array_equal(np.sort(everything), np.arange(60000))
    s = plan.shards[0]
    assert (len(s.train), len(s.validation), len(s.test)) == (3200, 800, 1000)
    assert s.batches(64) == 50


def test_partition_is_iid_and_deterministic():
    ds = synthetic(60000, features=4, seed=0)
    plan = partition_iid(ds, 12, seed=1)
    glob = np.bincount(ds.labels, minlength=10) / len(ds)
    for s in plan.shards:
        freq = np.bincount(ds.labels[s.indices], minlength=10) / len(s.indices)
        assert np.max(np.abs(freq - glob)) < 0.03
    again = partition_iid(ds, 12, seed=1)
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(plan.shards, again.shards))
    other = partition_iid(ds, 12, seed=2)
    assert not np.array_equal(plan.shards[0].indices, other.shards[0].indices)


def test_partition_near_equal_and_errors():
    ds = synthetic(103, features=4)
    sizes = [len(s.indices) for s in partition_iid(ds, 10).shards]
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == 103
    with pytest.raises(ParameterError):
        partition_iid(ds, 104)


def test_init_model():
    w = init_model("paper-size", seed=3)
    assert model_shapes(w) == [(784, 10), (10,)]
    assert sum(a.size for a in w) == 7850
    assert max(np.abs(a).max() for a in w) < 5
    assert not w[1].any()
    assert all(np.array_equal(a, b) for a, b in zip(w, init_model("paper-size", seed=3)))
    assert sum(a.size for a in init_model("hidden16")) == 12730
    with pytest.raises(ParameterError):
        init_model((784,))


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(0).normal(0, 30, (50, 10))
    assert np.allclose(softmax(z).sum(axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("preset", ["paper-size", "hidden16"])
def test_gradients_match_finite_differences(preset):
    ds = synthetic(10, 784, seed=4)
    w = init_model(preset, seed=5)
    # move biases off zero so their gradients are exercised at a generic point
    rng = np.random.default_rng(6)
    w = [a + rng.normal(0, 0.05, a.shape) if a.ndim == 1 else a for a in w]
    assert max_relative_error(w, ds.images.astype(np.float64), ds.labels) < 1e-4


def test_training_reduces_loss_and_is_reproducible():
    ds = synthetic(1500, features=32, seed=1)
    shard = partition_iid(ds, 1, seed=0).shards[0]
    w0 = init_model((32, 10), seed=0)
    cfg = TrainConfig(epochs=5, batch_size=32, learning_rate=0.01, patience=5)
    hist = []
    w1 = train_local(w0, shard, cfg, seed=7, history=hist)
    assert hist[-1] < hist[0]
    before = cross_entropy(forward(w0, shard.test.images)[0], shard.test.labels)
    assert evaluate(w1, shard.test).loss < before
    w2 = train_local(w0, shard, cfg, seed=7)
    assert all(np.array_equal(a, b) for a, b in zip(w1, w2))


def test_zero_epochs_leaves_weights_unchanged():
    ds = synthetic(100, features=8)
    shard = partition_iid(ds, 1).shards[0]
    w0 = init_model((8, 10))
    w1 = train_local(w0, shard, TrainConfig(epochs=0))
    assert all(np.array_equal(a, b) for a, b in zip(w0, w1))


def test_early_stopping_restores_best_weights():
    ds = synthetic(400, features=8, seed=2)
    shard = partition_iid(ds, 1).shards[0]
    hist = []
    w = train_local(init_model((8, 10)), shard, TrainConfig(epochs=200, batch_size=8, learning_rate=0.5, patience=2), history=hist)
    assert len(hist) < 200
    val = cross_entropy(forward(w, shard.validation.images)[0], shard.validation.labels)
    assert val == pytest.approx(min(hist), rel=1e-5)


def test_divergence_is_reported():
    ds = synthetic(100, features=8)
    shard = partition_iid(ds, 1).shards[0]
    w = init_model((8, 10))
    w[0][0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train_local(w, shard, TrainConfig(epochs=1))


def test_metrics_examples():
    labels = np.arange(100) % 10
    perfect = np.eye(10)[labels]
    m = classification_metrics(perfect, labels)
    assert m.accuracy == 1.0 and m.f1 == 1.0 and m.precision == 1.0 and m.recall == 1.0
    uniform = classification_metrics(np.full((100, 10), 0.1), labels)
    assert uniform.loss == pytest.approx(math.log(10), abs=1e-9)
    rng = np.random.default_rng(0)
    rand_labels = rng.integers(0, 10, 2000)
    guess = classification_metrics(rng.random((2000, 10)), rand_labels)
    assert abs(guess.accuracy - 0.1) < 0.03
    with pytest.raises(ParameterError):
        classification_metrics(np.zeros((0, 10)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ParameterError):
        evaluate(init_model((8, 10)), Dataset(np.zeros((0, 8), dtype=np.float32), np.zeros(0, dtype=np.int64)))


def test_train_config_validation():
    for bad in (dict(epochs=-1), dict(batch_size=0), dict(learning_rate=0), dict(patience=0)):
        with pytest.raises(ParameterError):
            TrainConfig(**bad)
