"""Datasets, IID partitioning and a small fully connected classifier.

The model is a stack of dense layers (ReLU between, softmax at the end)
trained with Adam on categorical cross-entropy.  Weights are a flat list
[W1, b1, W2, b2, ...] of float32 arrays with W of shape (fan_in, fan_out),
which is exactly the order the weight codec flattens.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hhefl.errors import FormatError, ParameterError, TrainingDiverged
from hhefl.rand import Seed, make_rng

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

MODEL_PRESETS = {
    "paper-size": (784, 10),
    "hidden16": (784, 16, 10),
}


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (n, d) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    n_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[0] != self.labels.shape[0]:
            raise ParameterError("images and labels disagree in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ParameterError("label out of range")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def features(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


# -- IDX files


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, magic: int) -> np.ndarray:
    """Raw uint8 array of an IDX file, checking the expected magic number."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    (got,) = struct.unpack_from(">I", data, 0)
    if got != magic:
        raise FormatError(f"{path}: magic {got:#010x}, expected {magic:#010x}")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims))
    if len(data) - header != count:
        raise FormatError(f"{path}: expected {count} bytes of data, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    arr = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    return Dataset(flat, labels.astype(np.int64))


def synthetic(n: int, features: int = 784, n_classes: int = 10, seed: Seed = 0, spread: float = 0.15) -> Dataset:
    """Two Gaussian clusters per class, clipped to [0, 1]."""
    rng = make_rng(seed, "synthetic", n, features, n_classes)
    centers = rng.uniform(0.1, 0.9, size=(n_classes, 2, features))
    labels = rng.integers(0, n_classes, size=n)
    which = rng.integers(0, 2, size=n)
    x = centers[labels, which] + rng.normal(0.0, spread, size=(n, features))
    return Dataset(np.clip(x, 0.0, 1.0).astype(np.float32), labels.astype(np.int64), n_classes)


# -- partitioning


@dataclass(frozen=True, eq=False)
class ClientShard:
    train: Dataset
    validation: Dataset
    test: Dataset
    indices: np.ndarray = field(repr=False)

    def batches(self, batch_size: int) -> int:
        return len(self.train) // batch_size


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    shards: list[ClientShard]

    def __len__(self) -> int:
        return len(self.shards)


def partition_iid(ds: Dataset, n_clients: int, seed: Seed = 0, test_frac: float = 0.2, val_frac: float = 0.2) -> PartitionPlan:
    """Uniform disjoint shards; each split 80/20 train/test, then 20% of train held out."""
    if not 1 <= n_clients <= len(ds):
        raise ParameterError(f"cannot split {len(ds)} samples across {n_clients} clients")
    rng = make_rng(seed, "partition", n_clients)
    perm = rng.permutation(len(ds))
    shards = []
    for idx in np.array_split(perm, n_clients):
        n_test = int(round(len(idx) * test_frac))
        train_idx, test_idx = idx[: len(idx) - n_test], idx[len(idx) - n_test :]
        n_val = int(round(len(train_idx) * val_frac))
        fit_idx, val_idx = train_idx[: len(train_idx) - n_val], train_idx[len(train_idx) - n_val :]
        shards.append(ClientShard(ds.subset(fit_idx), ds.subset(val_idx), ds.subset(test_idx), idx))
    return PartitionPlan(shards)


# -- model


def init_model(preset="paper-size", seed: Seed = 0) -> list[np.ndarray]:
    """Glorot-uniform weights (|w| <= sqrt(6 / (fan_in + fan_out)) < 1), zero biases."""
    sizes = MODEL_PRESETS[preset] if isinstance(preset, str) else tuple(preset)
    if len(sizes) < 2:
        raise ParameterError("a model needs at least an input and an output size")
    rng = make_rng(seed, "init", *sizes)
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32))
        weights.append(np.zeros(fan_out, dtype=np.float32))
    return weights


def model_shapes(weights) -> list[tuple[int, ...]]:
    return [tuple(w.shape) for w in weights]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(weights, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Class probabilities and the per-layer inputs needed for backprop."""
    acts = [x]
    h = x
    n_layers = len(weights) // 2
    for i in range(n_layers):
        z = h @ weights[2 * i] + weights[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(z, 0)
            acts.append(h)
        else:
            h = softmax(z)
    return h, acts


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    eps = np.finfo(probs.dtype).tiny
    return float(-np.mean(np.log(np.maximum(probs[np.arange(labels.size), labels], eps))))


def loss_and_grads(weights, x: np.ndarray, labels: np.ndarray) -> tuple[float, list[np.ndarray]]:
    probs, acts = forward(weights, x)
    loss = cross_entropy(probs, labels)
    delta = probs.copy()
    delta[np.arange(labels.size), labels] -= 1
    delta /= labels.size
    grads = [None] * len(weights)
    for i in reversed(range(len(weights) // 2)):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = (delta @ weights[2 * i].T) * (acts[i] > 0)
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.001
    patience: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.patience < 1:
            raise ParameterError("invalid training hyperparameters")


class Adam:
    def __init__(self, weights, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(w) for w in weights]
        self.v = [np.zeros_like(w) for w in weights]
        self.step = 0

    def update(self, weights, grads) -> None:
        c = self.cfg
        self.step += 1
        lr = c.learning_rate * np.sqrt(1 - c.beta2**self.step) / (1 - c.beta1**self.step)
        for w, g, m, v in zip(weights, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            w -= (lr * m / (np.sqrt(v) + c.eps)).astype(w.dtype)


def train_local(weights, shard: ClientShard, cfg: TrainConfig = TrainConfig(), seed: Seed = 0, history: list | None = None) -> list[np.ndarray]:
    """Mini-batch Adam with early stopping on validation loss (best weights restored)."""
    w = [np.array(x, dtype=np.float32, copy=True) for x in weights]
    if cfg.epochs == 0 or len(shard.train) == 0:
        return w
    opt = Adam(w, cfg)
    data = shard.train
    val = shard.validation if len(shard.validation) else shard.train
    best, best_loss, stale = [x.copy() for x in w], np.inf, 0
    for epoch in range(cfg.epochs):
        order = make_rng(seed, "epoch", epoch).permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(w, data.images[idx], data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            opt.update(w, grads)
        val_loss = cross_entropy(forward(w, val.images)[0], val.labels)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss in epoch {epoch}")
        if history is not None:
            history.append(val_loss)
        if val_loss < best_loss:
            best, best_loss, stale = [x.copy() for x in w], val_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    loss: float
    precision: float
    recall: float
    f1: float
    count: int


def classification_metrics(probs: np.ndarray, labels: np.ndarray) -> EvalMetrics:
    if labels.size == 0:
        raise ParameterError("cannot evaluate on an empty set")
    pred = probs.argmax(axis=1)
    classes = np.union1d(labels, pred)
    precision, recall, f1 = [], [], []
    for c in classes:
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return EvalMetrics(
        accuracy=float(np.mean(pred == labels)),
        loss=cross_entropy(probs, labels),
        precision=float(np.mean(precision)),
        recall=float(np.mean(recall)),
        f1=float(np.mean(f1)),
        count=int(labels.size),
    )


def evaluate(weights, ds: Dataset) -> EvalMetrics:
    if len(ds) == 0:
        raise ParameterError("cannot evaluate on an empty set")
    probs, _ = forward([np.asarray(w) for w in weights], ds.images)
    return classification_metrics(probs, ds.labels)
