"""Random-forest regression from feature vectors to transmission.

Each tree draws a bootstrap sample and a private feature subset of
ceil(frac * d) dimensions (subspace per tree, not per split), then grows a
CART regression tree with variance-reduction splits, leaf means, minimum
leaf size and no depth cap. Feature importance accumulates the total
sum-of-squares reduction attributed to each dimension across all splits of
all trees; unused dimensions stay at zero.

Baseline regressors for comparisons: least-squares linear, linear on the
logit of the target, and radial-basis ridge.
"""
from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

_FOREST_MAGIC = b"RFOR"
_FOREST_VERSION = 1


class ForestFormatError(ValueError):
    pass


@dataclass
class ForestConfig:
    n_trees: int = 200
    feature_frac: float = 1.0 / 3.0
    min_leaf: int = 5
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0.0 < self.feature_frac <= 1.0:
            raise ValueError("feature_frac must be in (0, 1]")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")


@dataclass
class Tree:
    """Flat node arrays; feature -1 marks a leaf holding `value`."""

    feature: np.ndarray    # int16, global feature index or -1
    threshold: np.ndarray  # float64, split goes left when x[f] <= threshold
    left: np.ndarray       # int32 child ids
    right: np.ndarray
    value: np.ndarray      # float64 leaf means (NaN on internal nodes)
    subset: np.ndarray     # int16 sorted feature subset this tree was grown on

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int32)
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                break
            rows = np.nonzero(active)[0]
            f = feat[rows].astype(np.int64)
            go_left = x[rows, f] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])
        return self.value[node]


class ForestModel:
    """Immutable trained ensemble; prediction is the mean over tree leaves."""

    def __init__(self, trees: list[Tree], n_features: int, importance: np.ndarray):
        self.trees = list(trees)
        self.n_features = int(n_features)
        self.importance = np.asarray(importance, dtype=np.float64)

    def predict(self, features: np.ndarray):
        x = np.asarray(features, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(
                f"expected features of dimension {self.n_features}, got shape {features.shape}")
        acc = np.zeros(len(x), dtype=np.float64)
        for tree in self.trees:
            acc += tree.predict(x)
        acc /= len(self.trees)
        return float(acc[0]) if single else acc


def predict(model: ForestModel, features: np.ndarray):
    return model.predict(features)


def feature_importance(model: ForestModel) -> np.ndarray:
    return model.importance.copy()


def _best_split(x: np.ndarray, y: np.ndarray, idx: np.ndarray, min_leaf: int):
    """Best (column, threshold, sse_reduction) over all features of the node, or None."""
    m = idx.size
    if m < 2 * min_leaf:
        return None
    yi = y[idx]
    if yi.max() == yi.min():
        return None
    xi = x[idx]
    order = np.argsort(xi, axis=0, kind="stable")
    xs = np.take_along_axis(xi, order, axis=0)
    ys = yi[order]
    cs = ys.cumsum(axis=0)
    total = cs[-1]
    k = np.arange(1, m, dtype=np.float64)[:, None]
    sl = cs[:-1]
    gain = sl * sl / k + (total - sl) ** 2 / (m - k)
    ok = xs[1:] > xs[:-1]
    if min_leaf > 1:
        ok[:min_leaf - 1] = False
        ok[m - min_leaf:] = False
    gain = np.where(ok, gain, -np.inf)
    flat = int(np.argmax(gain))
    row, col = divmod(flat, gain.shape[1])
    best = gain[row, col]
    if not np.isfinite(best):
        return None
    reduction = float(best - total[col] ** 2 / m)
    if reduction <= 0.0:
        return None
    a, b = xs[row, col], xs[row + 1, col]
    thr = 0.5 * (a + b)
    if thr >= b:  # midpoint rounded up to b would flip the boundary sample
        thr = a
    return int(col), float(thr), reduction


def _grow_tree(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """CART on (n, d_subset) columns; returns flat arrays plus per-column importance."""
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []
    importance = np.zeros(x.shape[1], dtype=np.float64)

    def new_node() -> int:
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        value.append(np.nan)
        return len(feature) - 1

    stack = [(new_node(), np.arange(len(y)))]
    while stack:
        nid, idx = stack.pop()
        split = _best_split(x, y, idx, min_leaf)
        if split is None:
            value[nid] = float(y[idx].mean())
            continue
        col, thr, reduction = split
        importance[col] += reduction
        mask = x[idx, col] <= thr
        feature[nid] = col
        threshold[nid] = thr
        lid, rid = new_node(), new_node()
        left[nid], right[nid] = lid, rid
        stack.append((rid, idx[~mask]))
        stack.append((lid, idx[mask]))
    return (np.asarray(feature, dtype=np.int16), np.asarray(threshold, dtype=np.float64),
            np.asarray(left, dtype=np.int32), np.asarray(right, dtype=np.int32),
            np.asarray(value, dtype=np.float64), importance)


def fit_forest(features: np.ndarray, targets: np.ndarray,
               config: ForestConfig | None = None, *, threads: int = 1) -> ForestModel:
    """Fit the ensemble. Trees are independent given their seed substreams, so
    the result does not depend on `threads`."""
    config = config or ForestConfig()
    x = np.ascontiguousarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if n < 2 or len(y) != n:
        raise ValueError("need at least 2 samples with matching targets")
    if y.min() <= 0.0 or y.max() > 1.0:
        raise ValueError("targets must lie in (0, 1]")
    subset_size = max(1, math.ceil(d * config.feature_frac))
    children = np.random.SeedSequence(config.seed).spawn(config.n_trees)

    def build_one(child) -> tuple[Tree, np.ndarray]:
        rng = np.random.default_rng(child)
        subset = np.sort(rng.choice(d, size=subset_size, replace=False)).astype(np.int16)
        rows = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        xt = x[rows][:, subset]
        feat, thr, left, right, value, imp_local = _grow_tree(xt, y[rows], config.min_leaf)
        feat_global = feat.copy()
        internal = feat >= 0
        feat_global[internal] = subset[feat[internal]]
        imp = np.zeros(d, dtype=np.float64)
        imp[subset] = imp_local
        return Tree(feat_global, thr, left, right, value, subset), imp

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            built = list(pool.map(build_one, children))
    else:
        built = [build_one(c) for c in children]
    trees = [t for t, _ in built]
    importance = np.zeros(d, dtype=np.float64)
    for _, imp in built:
        importance += imp
    return ForestModel(trees, d, importance)


# --- baseline regressors ------------------------------------------------------

def _solve_ridge(x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    xd = np.hstack([x, np.ones((len(x), 1))])
    gram = xd.T @ xd
    gram[np.diag_indices_from(gram)] += alpha
    return np.linalg.solve(gram, xd.T @ y)


class LinearRegressor:
    """Least-squares linear fit with a tiny ridge so singular designs never fail."""

    def __init__(self, alpha: float = 1e-8):
        self.alpha = alpha
        self.coef = None

    def fit(self, x, y):
        self.coef = _solve_ridge(np.asarray(x, np.float64), np.asarray(y, np.float64),
                                 self.alpha)
        return self

    def predict(self, x):
        x = np.atleast_2d(np.asarray(x, np.float64))
        raw = x @ self.coef[:-1] + self.coef[-1]
        return np.clip(raw, 1e-6, 1.0)


class LogisticLinkRegressor:
    """Linear fit on logit(t); targets at 1 are clamped to 1 - eps before the transform."""

    def __init__(self, alpha: float = 1e-8, eps: float = 1e-6):
        self.alpha = alpha
        self.eps = eps
        self.coef = None

    def fit(self, x, y):
        t = np.clip(np.asarray(y, np.float64), self.eps, 1.0 - self.eps)
        z = np.log(t / (1.0 - t))
        self.coef = _solve_ridge(np.asarray(x, np.float64), z, self.alpha)
        return self

    def predict(self, x):
        x = np.atleast_2d(np.asarray(x, np.float64))
        z = x @ self.coef[:-1] + self.coef[-1]
        return np.clip(1.0 / (1.0 + np.exp(-z)), 1e-6, 1.0)


class KernelRidgeRegressor:
    """Radial-basis ridge regression; anchors are subsampled past `max_train` rows."""

    def __init__(self, alpha: float = 1e-3, max_train: int = 2000, seed: int = 0):
        self.alpha = alpha
        self.max_train = max_train
        self.seed = seed
        self.anchors = None
        self.dual = None
        self.gamma = None
        self.offset = None

    def _kernel(self, a, b):
        sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
              - 2.0 * a @ b.T)
        return np.exp(-self.gamma * np.maximum(sq, 0.0))

    def fit(self, x, y):
        x = np.asarray(x, np.float64)
        y = np.asarray(y, np.float64)
        if len(x) > self.max_train:
            keep = np.sort(np.random.default_rng(self.seed).choice(
                len(x), size=self.max_train, replace=False))
            x, y = x[keep], y[keep]
        var = float(x.var())
        self.gamma = 1.0 / (x.shape[1] * var) if var > 0 else 1.0
        self.anchors = x
        self.offset = float(y.mean())
        k = self._kernel(x, x)
        k[np.diag_indices_from(k)] += self.alpha
        self.dual = np.linalg.solve(k, y - self.offset)
        return self

    def predict(self, x):
        x = np.atleast_2d(np.asarray(x, np.float64))
        raw = self._kernel(x, self.anchors) @ self.dual + self.offset
        return np.clip(raw, 1e-6, 1.0)


BASELINE_KINDS = ("linear", "logistic-link", "kernel")


def fit_baseline(kind: str, features: np.ndarray, targets: np.ndarray, *, seed: int = 0):
    if kind == "linear":
        model = LinearRegressor()
    elif kind == "logistic-link":
        model = LogisticLinkRegressor()
    elif kind == "kernel":
        model = KernelRidgeRegressor(seed=seed)
    else:
        raise ValueError(f"kind must be one of {BASELINE_KINDS}, got {kind!r}")
    return model.fit(features, targets)


# --- forest file format --------------------------------------------------------
#
# Little-endian:
#   magic "RFOR" | u32 version | u32 n_trees | u16 n_features | u16 subset_size
#   float64 importance[n_features]
#   per tree: i16 subset[subset_size] | u32 n_nodes
#             | i16 feature[n] | f64 threshold[n] | i32 left[n] | i32 right[n]
#             | f64 value[n]

def save_forest(path, model: ForestModel) -> None:
    subset_size = len(model.trees[0].subset) if model.trees else 0
    with open(path, "wb") as f:
        f.write(_FOREST_MAGIC)
        f.write(struct.pack("<IIHH", _FOREST_VERSION, len(model.trees),
                            model.n_features, subset_size))
        f.write(model.importance.astype("<f8").tobytes())
        for tree in model.trees:
            f.write(tree.subset.astype("<i2").tobytes())
            f.write(struct.pack("<I", len(tree.feature)))
            f.write(tree.feature.astype("<i2").tobytes())
            f.write(tree.threshold.astype("<f8").tobytes())
            f.write(tree.left.astype("<i4").tobytes())
            f.write(tree.right.astype("<i4").tobytes())
            f.write(tree.value.astype("<f8").tobytes())


def load_forest(path) -> ForestModel:
    blob = open(path, "rb").read()
    off = 0

    def take(count, what):
        nonlocal off
        if off + count > len(blob):
            raise ForestFormatError(
                f"{path}: truncated while reading {what} at offset {off}")
        out = blob[off:off + count]
        off += count
        return out

    if take(4, "magic") != _FOREST_MAGIC:
        raise ForestFormatError(f"{path}: not a forest file (bad magic)")
    version, n_trees, n_features, subset_size = struct.unpack("<IIHH", take(12, "header"))
    if version != _FOREST_VERSION:
        raise ForestFormatError(
            f"{path}: file version {version}, this reader supports {_FOREST_VERSION}")
    importance = np.frombuffer(take(8 * n_features, "importance"), dtype="<f8").copy()
    trees = []
    for _ in range(n_trees):
        subset = np.frombuffer(take(2 * subset_size, "subset"), dtype="<i2").copy()
        (n_nodes,) = struct.unpack("<I", take(4, "node count"))
        feature = np.frombuffer(take(2 * n_nodes, "features"), dtype="<i2").copy()
        threshold = np.frombuffer(take(8 * n_nodes, "thresholds"), dtype="<f8").copy()
        left = np.frombuffer(take(4 * n_nodes, "left children"), dtype="<i4").copy()
        right = np.frombuffer(take(4 * n_nodes, "right children"), dtype="<i4").copy()
        value = np.frombuffer(take(8 * n_nodes, "values"), dtype="<f8").copy()
        trees.append(Tree(feature, threshold, left, right, value, subset))
    if off != len(blob):
        raise ForestFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return ForestModel(trees, n_features, importance)


def write_importance_csv(path, importance: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["dimension", "importance"])
        for i, v in enumerate(np.asarray(importance)):
            writer.writerow([i, f"{v:.10g}"])
