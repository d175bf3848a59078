"""Small feed-forward CNN engine on plain numpy arrays.

Feature maps are float32 arrays shaped (channels, height, width); batched
calls add a leading axis, so every layer works on (batch, C, H, W) or
(batch, features). Layers cache whatever the backward pass needs, so
``backward`` must always follow the matching ``forward``. Parameterised
layers carry their own gradient and momentum buffers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PARAM_DTYPE = np.float32


class ShapeError(ValueError):
    """Input does not match the shape a layer was built for."""


@dataclass
class TrainConfig:
    """SGD settings. The step size decays as initial_lr * (1 + 1e-4*iter)**-0.75."""

    initial_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Learning rate used by the mini-batch update with 0-based index `iteration`."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return config.initial_lr * (1.0 + 1e-4 * iteration) ** -0.75


def sgd_update(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
               lr: float, momentum: float) -> None:
    """One classical-momentum step, in place: v <- m*v - lr*g; p <- p + v."""
    if grad.shape != param.shape or velocity.shape != param.shape:
        raise ShapeError(
            f"param/grad/velocity shapes differ: {param.shape}/{grad.shape}/{velocity.shape}")
    velocity *= momentum
    velocity -= (lr * grad).astype(velocity.dtype, copy=False)
    param += velocity


def sgd_step(layers, lr: float, momentum: float) -> None:
    """Apply sgd_update to every parameter of every layer, in declaration order."""
    for layer in layers:
        for param, grad, velocity in layer.param_triples():
            sgd_update(param, grad, velocity, lr, momentum)


class Layer:
    """Base forward/backward node."""

    name: str = ""

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def param_triples(self):
        """(param, grad, velocity) tuples for the optimizer; empty if parameter-free."""
        return []

    def param_grad_items(self):
        """(name, param, grad) tuples after a backward pass; empty if parameter-free."""
        return []

    def n_params(self) -> int:
        return sum(p.size for p, _, _ in self.param_triples())

    def clone(self, dtype) -> "Layer":
        dup = type(self)()
        dup.name = self.name
        return dup


class Conv2d(Layer):
    """Valid 2D convolution, stride 1, square kernel, with bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator | None = None, *, name: str = "conv",
                 dtype=PARAM_DTYPE):
        k = int(kernel_size)
        fan_in = in_channels * k * k
        fan_out = out_channels * k * k
        if rng is None:
            w = np.zeros((out_channels, in_channels, k, k))
        else:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(out_channels, in_channels, k, k))
        self.w = w.astype(dtype)
        self.b = np.zeros(out_channels, dtype=dtype)
        self.vw = np.zeros_like(self.w)
        self.vb = np.zeros_like(self.b)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.name = name
        self._cols = None
        self._in_shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected (batch, C, H, W), got {x.shape}")
        n, c, h, w = x.shape
        oc, ic, k, _ = self.w.shape
        if c != ic:
            raise ShapeError(f"{self.name}: input has {c} channels, kernel expects {ic}")
        if h < k or w < k:
            raise ShapeError(f"{self.name}: input {h}x{w} smaller than {k}x{k} kernel")
        oh, ow = h - k + 1, w - k + 1
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
        cols = cols.reshape(n * oh * ow, ic * k * k)
        out = cols @ self.w.reshape(oc, -1).T
        out += self.b
        self._cols = cols
        self._in_shape = x.shape
        return np.ascontiguousarray(out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        n, c, h, w = self._in_shape
        oc, ic, k, _ = self.w.shape
        oh, ow = h - k + 1, w - k + 1
        if grad.shape != (n, oc, oh, ow):
            raise ShapeError(
                f"{self.name}: grad shape {grad.shape} does not match output {(n, oc, oh, ow)}")
        gmat = np.ascontiguousarray(grad.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
        self.gb = gmat.sum(axis=0)
        self.gw = (gmat.T @ self._cols).reshape(self.w.shape)
        gcols = (gmat @ self.w.reshape(oc, -1)).reshape(n, oh, ow, ic, k, k)
        gx = np.zeros((n, c, h, w), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + oh, j:j + ow] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx

    def param_triples(self):
        return [(self.w, self.gw, self.vw), (self.b, self.gb, self.vb)]

    def param_grad_items(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]

    def clone(self, dtype) -> "Conv2d":
        oc, ic, k, _ = self.w.shape
        dup = Conv2d(ic, oc, k, name=self.name, dtype=dtype)
        dup.w = self.w.astype(dtype)
        dup.b = self.b.astype(dtype)
        return dup


class MaxPool2x2(Layer):
    """2x2 non-overlapping max pooling; ties go to the first element in row-major window order."""

    def __init__(self, *, name: str = "pool"):
        self.name = name
        self.argmax = None
        self._in_shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected (batch, C, H, W), got {x.shape}")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"{self.name}: spatial dims must be even, got {h}x{w}")
        v = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        v = v.reshape(n, c, h // 2, w // 2, 4)
        self.argmax = v.argmax(axis=-1)
        self._in_shape = x.shape
        return np.take_along_axis(v, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        n, c, h, w = self._in_shape
        if grad.shape != self.argmax.shape:
            raise ShapeError(
                f"{self.name}: grad shape {grad.shape} does not match output {self.argmax.shape}")
        gv = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(gv, self.argmax[..., None], grad[..., None], axis=-1)
        gx = gv.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return gx.reshape(n, c, h, w)


class ReLU(Layer):
    """max(0, x); the subgradient at exactly 0 is taken as 0."""

    def __init__(self, *, name: str = "relu"):
        self.name = name
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return np.where(self._mask, grad, grad.dtype.type(0))


class Rank(Layer):
    """Sorts each channel's feature map ascending, filled back in row-major order.

    Values are only permuted, never modified. The permutation applied to each
    map is cached so the backward pass can route every output gradient to the
    input element it came from. The sort is stable: equal values keep their
    original relative order, which makes the permutation (and therefore the
    gradient routing) deterministic. No parameters.
    """

    def __init__(self, *, name: str = "rank"):
        self.name = name
        self.perm = None
        self._in_shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected (batch, C, H, W), got {x.shape}")
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w)
        self.perm = np.argsort(flat, axis=2, kind="stable")
        self._in_shape = x.shape
        return np.take_along_axis(flat, self.perm, axis=2).reshape(x.shape)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if grad.shape != self._in_shape:
            raise ShapeError(
                f"{self.name}: grad shape {grad.shape} does not match input {self._in_shape}")
        n, c, h, w = self._in_shape
        gflat = grad.reshape(n, c, h * w)
        gx = np.empty_like(gflat)
        np.put_along_axis(gx, self.perm, gflat, axis=2)
        return gx.reshape(n, c, h, w)


class Flatten(Layer):
    """(batch, C, H, W) -> (batch, C*H*W). Channel-major then row-major; fixed for serialization."""

    def __init__(self, *, name: str = "flatten"):
        self.name = name
        self._in_shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self._in_shape)


class Dense(Layer):
    """Affine map y = x @ W.T + b with W shaped (out_features, in_features)."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, *, name: str = "dense",
                 dtype=PARAM_DTYPE):
        if rng is None:
            w = np.zeros((out_features, in_features))
        else:
            limit = math.sqrt(6.0 / (in_features + out_features))
            w = rng.uniform(-limit, limit, size=(out_features, in_features))
        self.w = w.astype(dtype)
        self.b = np.zeros(out_features, dtype=dtype)
        self.vw = np.zeros_like(self.w)
        self.vb = np.zeros_like(self.b)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.name = name
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.w.shape[1]:
            raise ShapeError(
                f"{self.name}: expected (batch, {self.w.shape[1]}), got {x.shape}")
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if grad.ndim != 2 or grad.shape != (self._x.shape[0], self.w.shape[0]):
            raise ShapeError(
                f"{self.name}: grad shape {grad.shape} does not match output "
                f"({self._x.shape[0]}, {self.w.shape[0]})")
        self.gw = grad.T @ self._x
        self.gb = grad.sum(axis=0)
        return grad @ self.w

    def param_triples(self):
        return [(self.w, self.gw, self.vw), (self.b, self.gb, self.vb)]

    def param_grad_items(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]

    def clone(self, dtype) -> "Dense":
        out_f, in_f = self.w.shape
        dup = Dense(in_f, out_f, name=self.name, dtype=dtype)
        dup.w = self.w.astype(dtype)
        dup.b = self.b.astype(dtype)
        return dup


@dataclass(frozen=True)
class RankCorrespondence:
    """Routing table of a ranked feature map: perm[n] is the 0-based input index
    of the element that became the n-th smallest output element."""

    perm: np.ndarray

    def is_valid(self) -> bool:
        n = self.perm.size
        if self.perm.shape != (n,) or not np.issubdtype(self.perm.dtype, np.integer):
            return False
        if n == 0:
            return True
        if self.perm.min() < 0 or self.perm.max() >= n:
            return False
        return bool((np.bincount(self.perm, minlength=n) == 1).all())


def rank_forward(feature_map: np.ndarray) -> tuple[np.ndarray, RankCorrespondence]:
    """Sort one feature map ascending into row-major order.

    Returns the ranked map (same shape) and the correspondence used to build
    it. Stable under ties.
    """
    arr = np.asarray(feature_map)
    flat = arr.reshape(-1)
    perm = np.argsort(flat, kind="stable")
    return flat[perm].reshape(arr.shape), RankCorrespondence(perm)


def rank_backward(grad_out: np.ndarray, corr: RankCorrespondence) -> np.ndarray:
    """Route each output-position gradient back to the input element it came from."""
    g = np.asarray(grad_out)
    if not isinstance(corr, RankCorrespondence):
        corr = RankCorrespondence(np.asarray(corr))
    if corr.perm.size != g.size or not corr.is_valid():
        raise ValueError("correspondence is not a valid permutation for this gradient")
    gflat = g.reshape(-1)
    gx = np.empty_like(gflat)
    gx[corr.perm] = gflat
    return gx.reshape(g.shape)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, true_bin: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against the 1-based class `true_bin`.

    Returns (loss, grad wrt logits). Computed with max subtraction, so large
    logits do not overflow; the gradient components sum to zero.
    """
    v = np.asarray(logits, dtype=np.float64).reshape(-1)
    k = v.size
    if not 1 <= true_bin <= k:
        raise ValueError(f"true_bin must be in 1..{k}, got {true_bin}")
    z = v - v.max()
    lse = math.log(np.exp(z).sum())
    loss = lse - z[true_bin - 1]
    grad = np.exp(z - lse)
    grad[true_bin - 1] -= 1.0
    return float(loss), grad


def softmax_xent_batch(logits: np.ndarray, bins: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch; `bins` holds 1-based classes.

    The returned gradient is already divided by the batch size, matching the
    batch-averaged loss.
    """
    n, _ = logits.shape
    idx = np.asarray(bins, dtype=np.int64) - 1
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    esum = e.sum(axis=1)
    losses = np.log(esum) - z[np.arange(n), idx]
    grad = e / esum[:, None]
    grad[np.arange(n), idx] -= 1.0
    grad /= n
    return float(losses.mean()), grad.astype(logits.dtype, copy=False)


def squared_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error for a (batch, 1) prediction column; grad averaged over the batch."""
    d = pred[:, 0].astype(np.float64) - np.asarray(target, dtype=np.float64)
    grad = (2.0 / d.size) * d[:, None]
    return float(np.mean(d * d)), grad.astype(pred.dtype, copy=False)
