"""The fixed transmission-classification network.

Stack: 3x20x20 input -> conv 5x5 (32 maps, 16x16) -> maxpool (8x8) -> ranking
-> conv 3x3 (6x6) -> conv 3x3 (4x4) -> maxpool (2x2) -> dense 128->64 ->
dense 64->64 -> dense 64->10, with ReLU after every conv and after the first
dense layer. The ranking layer is parameter-free and can be moved (or
dropped) without changing any parameter shape, which is what makes the
plain-CNN control a clean ablation.

The 10 output classes are transmission bins: bin j covers (j/10 - 0.1, j/10].
The 64-wide output of the second dense layer is the feature vector handed to
the downstream regressor.
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .nn import (Conv2d, Dense, Flatten, Layer, MaxPool2x2, Rank, ReLU,
                 ShapeError, TrainConfig, lr_at, sgd_step, softmax,
                 softmax_xent_batch)

PATCH_SHAPE = (3, 20, 20)
N_BINS = 10
FEATURE_DIM = 64

PLACEMENTS = ("conv1", "pool1", "conv2", "conv3", "pool2", "none")
DEFAULT_PLACEMENT = "pool1"

# Feature tap -> name of the layer whose output is the feature vector.
FEATURE_TAPS = {"pool2": "flatten", "fc1": "relu_fc1", "fc2": "fc2"}
DEFAULT_TAP = "fc2"

_MODEL_MAGIC = b"RCNN"
_MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a batch produces a non-finite loss."""

    def __init__(self, epoch: int, iteration: int, batch_indices: np.ndarray):
        super().__init__(
            f"non-finite loss at epoch {epoch}, iteration {iteration} "
            f"(batch of {len(batch_indices)} samples)")
        self.epoch = epoch
        self.iteration = iteration
        self.batch_indices = np.asarray(batch_indices)


@dataclass(frozen=True)
class BinLabel:
    """1-based transmission bin index with its one-hot encoding."""

    j: int

    def one_hot(self) -> np.ndarray:
        v = np.zeros(N_BINS, dtype=np.float32)
        v[self.j - 1] = 1.0
        return v


def bin_label(t: float) -> BinLabel:
    """Bin of a transmission value: the smallest j with t <= j/10."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"transmission must be in (0, 1], got {t}")
    j = int(math.ceil(t * 10.0))
    # ceil on floats can land one bin off right at a boundary; fix against
    # the interval definition directly.
    while j > 1 and t <= (j - 1) / 10.0:
        j -= 1
    while j < N_BINS and t > j / 10.0:
        j += 1
    return BinLabel(j)


def bin_labels(t: np.ndarray) -> np.ndarray:
    """Vectorised bin_label; returns 1-based uint8 labels."""
    t = np.asarray(t, dtype=np.float64)
    if t.size and (t.min() <= 0.0 or t.max() > 1.0):
        raise ValueError("transmission values must be in (0, 1]")
    j = np.ceil(t * 10.0).astype(np.int64)
    j = np.clip(j, 1, N_BINS)
    j -= (j > 1) & (t <= (j - 1) / 10.0)
    j += (j < N_BINS) & (t > j / 10.0)
    return j.astype(np.uint8)


class NetworkModel:
    """Ordered layer stack exposing class logits and intermediate feature taps."""

    def __init__(self, layers: list[Layer], placement: str, trained: bool = False):
        self.layers = list(layers)
        self.placement = placement
        self.trained = trained
        self._index = {layer.name: i for i, layer in enumerate(self.layers)}

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != PATCH_SHAPE:
            raise ShapeError(f"expected (batch, {PATCH_SHAPE}), got {x.shape}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = self._check_input(x)
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def features(self, x: np.ndarray, tap: str = DEFAULT_TAP) -> np.ndarray:
        """Activations at a named tap: 'fc2' (64), 'fc1' (64) or 'pool2' (128)."""
        if tap not in FEATURE_TAPS:
            raise ValueError(f"unknown feature tap {tap!r}, expected one of {sorted(FEATURE_TAPS)}")
        stop = self._index[FEATURE_TAPS[tap]]
        out = self._check_input(x)
        for layer in self.layers[:stop + 1]:
            out = layer.forward(out)
        return out

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def astype(self, dtype) -> "NetworkModel":
        return NetworkModel([layer.clone(dtype) for layer in self.layers],
                            self.placement, self.trained)


def build_network(placement: str = DEFAULT_PLACEMENT, seed: int = 0) -> NetworkModel:
    """Assemble the fixed stack, inserting the ranking layer at `placement`.

    Placements name the layer after which the ranking layer sits; "none"
    builds the plain-CNN control. The same seed yields identical parameters
    for every placement, because the ranking layer draws nothing from the rng.
    """
    if placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
    rng = np.random.default_rng(seed)
    stack: list[Layer] = [
        Conv2d(3, 32, 5, rng, name="conv1"),
        ReLU(name="relu1"),
        MaxPool2x2(name="pool1"),
        Conv2d(32, 32, 3, rng, name="conv2"),
        ReLU(name="relu2"),
        Conv2d(32, 32, 3, rng, name="conv3"),
        ReLU(name="relu3"),
        MaxPool2x2(name="pool2"),
        Flatten(name="flatten"),
        Dense(128, 64, rng, name="fc1"),
        ReLU(name="relu_fc1"),
        Dense(64, 64, rng, name="fc2"),
        Dense(64, 10, rng, name="out"),
    ]
    if placement != "none":
        anchor = {"conv1": "relu1", "pool1": "pool1", "conv2": "relu2",
                  "conv3": "relu3", "pool2": "pool2"}[placement]
        pos = next(i for i, layer in enumerate(stack) if layer.name == anchor)
        stack.insert(pos + 1, Rank(name="rank"))
    return NetworkModel(stack, placement)


def extract_features(model: NetworkModel, patch: np.ndarray,
                     tap: str = DEFAULT_TAP) -> np.ndarray:
    """Feature vector for a single 3x20x20 patch (the classification head is bypassed)."""
    arr = np.asarray(patch, dtype=np.float32)
    if arr.shape != PATCH_SHAPE:
        raise ShapeError(f"expected patch of shape {PATCH_SHAPE}, got {arr.shape}")
    return model.features(arr[None], tap)[0]


def classify(model: NetworkModel, patch: np.ndarray) -> np.ndarray:
    """Bin probabilities for a single patch; softmax of the raw logits."""
    arr = np.asarray(patch, dtype=np.float32)
    if arr.shape != PATCH_SHAPE:
        raise ShapeError(f"expected patch of shape {PATCH_SHAPE}, got {arr.shape}")
    return softmax(model.forward(arr[None])[0])


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    val_accuracy: float
    lr_end: float


def evaluate_accuracy(model: NetworkModel, x: np.ndarray, labels: np.ndarray,
                      batch: int = 512) -> float:
    """Top-1 accuracy of the predicted bin over 1-based labels."""
    if len(x) == 0:
        return float("nan")
    hits = 0
    for s in range(0, len(x), batch):
        logits = model.forward(x[s:s + batch])
        hits += int((logits.argmax(axis=1) + 1 == labels[s:s + batch]).sum())
    return hits / len(x)


def run_sgd(model: NetworkModel, x: np.ndarray, targets: np.ndarray,
            config: TrainConfig, *, loss_fn=softmax_xent_batch,
            eval_fn=None, log=None) -> list[EpochStats]:
    """Mini-batch SGD over (x, targets); the inner loop shared by all training paths.

    Shuffling is reseeded per epoch from (rng_seed, epoch). `loss_fn` maps
    (logits, target batch) to (loss, dlogits); `eval_fn`, if given, is called
    after each epoch and its value recorded as the epoch's validation metric.
    """
    n = len(x)
    if n == 0:
        raise ValueError("training set is empty")
    history: list[EpochStats] = []
    iteration = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.rng_seed, 7919, epoch]).permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            logits = model.forward(x[idx])
            loss, dlogits = loss_fn(logits, targets[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, iteration, idx)
            model.backward(dlogits)
            sgd_step(model.layers, lr_at(iteration, config), config.momentum)
            iteration += 1
            losses.append(loss)
        stats = EpochStats(epoch=epoch,
                           mean_loss=float(np.mean(losses)),
                           val_accuracy=float(eval_fn(model)) if eval_fn else float("nan"),
                           lr_end=lr_at(iteration, config))
        history.append(stats)
        if log:
            log(f"epoch {stats.epoch:3d}  loss {stats.mean_loss:.4f}  "
                f"val_acc {stats.val_accuracy:.3f}  lr {stats.lr_end:.5f}")
    return history


def split_validation(n: int, seed: int, val_frac: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train_idx, val_idx) split; val gets ceil(val_frac * n) samples."""
    perm = np.random.default_rng([seed, 104729]).permutation(n)
    n_val = int(math.ceil(val_frac * n)) if val_frac > 0 else 0
    return perm[n_val:], perm[:n_val]


def train(model: NetworkModel, dataset, config: TrainConfig, *,
          val_frac: float = 0.05, log=None) -> tuple[NetworkModel, list[EpochStats]]:
    """Train the bin classifier on a patch dataset.

    A `val_frac` share of the dataset is held out (deterministically from the
    config seed) and its top-1 accuracy recorded per epoch.
    """
    x = np.ascontiguousarray(dataset.hazy, dtype=np.float32)
    labels = np.asarray(dataset.labels)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    if labels.min() < 1 or labels.max() > N_BINS:
        raise ValueError("labels must be 1-based bin indices in 1..10")
    train_idx, val_idx = split_validation(len(x), config.rng_seed, val_frac)
    xv, lv = x[val_idx], labels[val_idx]
    eval_fn = (lambda m: evaluate_accuracy(m, xv, lv)) if len(val_idx) else None
    history = run_sgd(model, x[train_idx], labels[train_idx], config,
                      eval_fn=eval_fn, log=log)
    model.trained = True
    return model, history


def write_history_csv(path, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss", "val_accuracy", "lr_end"])
        for row in history:
            writer.writerow([row.epoch, f"{row.mean_loss:.8f}",
                             f"{row.val_accuracy:.8f}", f"{row.lr_end:.10f}"])


# --- binary model format ----------------------------------------------------
#
# Little-endian throughout.
#   magic "RCNN" | u16 version | u8 trained | u8 n_layers
#   u8 placement_len | placement ascii
#   per layer:
#     u8 tag | u8 name_len | name ascii | payload
#     tag 1 conv : u16 out_ch, in_ch, k; float32 weights (C-order), float32 bias
#     tag 2 pool : -
#     tag 3 relu : -
#     tag 4 rank : -
#     tag 5 flat : -
#     tag 6 dense: u16 out, in; float32 weights, float32 bias
# The text sidecar "<path>.txt" records the TrainConfig; it is informational
# and never read back.

_TAGS = {Conv2d: 1, MaxPool2x2: 2, ReLU: 3, Rank: 4, Flatten: 5, Dense: 6}


def _write_blob(f, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_model(path, model: NetworkModel, config: TrainConfig | None = None) -> None:
    buf = io.BytesIO()
    placement = model.placement.encode("ascii")
    buf.write(_MODEL_MAGIC)
    buf.write(struct.pack("<HBB", _MODEL_VERSION, int(model.trained), len(model.layers)))
    buf.write(struct.pack("<B", len(placement)))
    buf.write(placement)
    for layer in model.layers:
        tag = _TAGS[type(layer)]
        name = layer.name.encode("ascii")
        buf.write(struct.pack("<BB", tag, len(name)))
        buf.write(name)
        if isinstance(layer, Conv2d):
            oc, ic, k, _ = layer.w.shape
            buf.write(struct.pack("<HHH", oc, ic, k))
            _write_blob(buf, layer.w)
            _write_blob(buf, layer.b)
        elif isinstance(layer, Dense):
            out_f, in_f = layer.w.shape
            buf.write(struct.pack("<HH", out_f, in_f))
            _write_blob(buf, layer.w)
            _write_blob(buf, layer.b)
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    if config is not None:
        with open(f"{path}.txt", "w") as f:
            f.write(f"placement={model.placement}\n")
            f.write(f"initial_lr={config.initial_lr}\n")
            f.write(f"momentum={config.momentum}\n")
            f.write(f"batch_size={config.batch_size}\n")
            f.write(f"epochs={config.epochs}\n")
            f.write(f"rng_seed={config.rng_seed}\n")


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ModelFormatError(
                f"truncated model file: needed {n} bytes at offset {self.off}, "
                f"have {len(self.blob) - self.off}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).copy()


def load_model(path) -> NetworkModel:
    r = _Reader(open(path, "rb").read())
    if r.take(4) != _MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    version, trained, n_layers = r.unpack("<HBB")
    if version != _MODEL_VERSION:
        raise ModelFormatError(
            f"{path}: file version {version}, this reader supports {_MODEL_VERSION}")
    (plen,) = r.unpack("<B")
    placement = r.take(plen).decode("ascii")
    layers: list[Layer] = []
    for _ in range(n_layers):
        tag, nlen = r.unpack("<BB")
        name = r.take(nlen).decode("ascii")
        if tag == 1:
            oc, ic, k = r.unpack("<HHH")
            layer = Conv2d(ic, oc, k, name=name)
            layer.w = r.floats((oc, ic, k, k))
            layer.b = r.floats((oc,))
        elif tag == 2:
            layer = MaxPool2x2(name=name)
        elif tag == 3:
            layer = ReLU(name=name)
        elif tag == 4:
            layer = Rank(name=name)
        elif tag == 5:
            layer = Flatten(name=name)
        elif tag == 6:
            out_f, in_f = r.unpack("<HH")
            layer = Dense(in_f, out_f, name=name)
            layer.w = r.floats((out_f, in_f))
            layer.b = r.floats((out_f,))
        else:
            raise ModelFormatError(f"{path}: unknown layer tag {tag} at offset {r.off}")
        layers.append(layer)
    return NetworkModel(layers, placement, trained=bool(trained))
