"""Quantitative evaluation: synthetic benchmark cases, L1 metrics, and the
training-time comparison harness.

Benchmark cases pair a clear image with a ground-truth transmission map
(constant, or 0.8 x a disparity map) and the hazy image synthesized from
them at atmospheric light (1, 1, 1). Comparisons at patch level (which
network placement, feature tap, regressor, head or data budget gives the
lowest held-out transmission error) retrain identical arms that differ in
exactly one factor.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .nn import Dense, TrainConfig, squared_loss
from .network import NetworkModel, build_network, run_sgd, split_validation
from .pipeline import DehazeOptions, dehaze, recover
from .synth import PatchDataset, synthesize_hazy
from .forest import ForestConfig, fit_baseline, fit_forest

EVAL_LIGHT = (1.0, 1.0, 1.0)

ABLATIONS = ("ranking-vs-plain", "placement", "feature-layer", "regressor",
             "end-to-end", "data-size")


@dataclass
class EvalCase:
    """Clear/hazy image pair with its ground-truth transmission."""

    name: str
    clear: np.ndarray
    t_map: np.ndarray
    hazy: np.ndarray
    disparity: np.ndarray | None = None


def make_eval_case(clear: np.ndarray, mode: str, *, t: float | None = None,
                   disparity: np.ndarray | None = None,
                   name: str = "case") -> EvalCase:
    """Synthesize a benchmark case: `mode` "constant" takes a scalar t,
    "disparity" takes a (0, 1] map scaled by 0.8."""
    clear = np.asarray(clear, dtype=np.float32)
    if mode == "constant":
        if t is None or not 0.0 < t <= 1.0:
            raise ValueError(f"constant mode needs t in (0, 1], got {t}")
        t_map = np.full(clear.shape[:2], t, dtype=np.float32)
        disparity = None
    elif mode == "disparity":
        if disparity is None:
            raise ValueError("disparity mode needs a disparity map")
        d = np.asarray(disparity, dtype=np.float64)
        if d.shape != clear.shape[:2]:
            raise ValueError(f"disparity {d.shape} does not match image {clear.shape[:2]}")
        if d.min() <= 0.0 or d.max() > 1.0:
            raise ValueError("disparity values must lie in (0, 1]")
        t_map = np.clip(0.8 * d, np.nextafter(0.0, 1.0), 0.8).astype(np.float32)
    else:
        raise ValueError(f"mode must be 'constant' or 'disparity', got {mode!r}")
    hazy = synthesize_hazy(clear, t_map.astype(np.float64), EVAL_LIGHT, channel_axis=-1)
    return EvalCase(name=name, clear=clear, t_map=t_map, hazy=hazy, disparity=disparity)


def ramp_disparity(shape: tuple[int, int], *, lo: float = 0.2, hi: float = 1.0,
                   orientation: str = "horizontal") -> np.ndarray:
    """Procedural disparity: a linear ramp from `lo` to `hi` across the image.

    The default `lo` keeps t = 0.8*d at or above 0.16: comfortably over the
    0.05 recovery floor (so recovery with the true transmission stays exact)
    and away from the near-opaque regime where 1/t blows tiny estimation
    errors into large image errors.
    """
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError("need 0 < lo <= hi <= 1")
    h, w = shape
    if orientation == "horizontal":
        ramp = np.tile(np.linspace(lo, hi, w), (h, 1))
    elif orientation == "vertical":
        ramp = np.tile(np.linspace(lo, hi, h)[:, None], (1, w))
    elif orientation == "diagonal":
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        ramp = lo + (hi - lo) * (yy / max(h - 1, 1) + xx / max(w - 1, 1)) / 2.0
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    return ramp.astype(np.float32)


def make_default_cases(clear_images, n_cases: int = 10) -> list[EvalCase]:
    """Half constant-t cases, half disparity ramps, over the given clear images.

    Constant transmissions stay at or below 0.8, the ceiling the disparity
    protocol also imposes (t = 0.8 * d with d <= 1).
    """
    cases = []
    t_values = np.linspace(0.35, 0.8, (n_cases + 1) // 2)
    orientations = ("horizontal", "vertical", "diagonal")
    for i in range(n_cases):
        clear = np.asarray(clear_images[i % len(clear_images)], dtype=np.float32)
        if i % 2 == 0:
            t = float(t_values[i // 2])
            cases.append(make_eval_case(clear, "constant", t=t, name=f"const-{t:.2f}"))
        else:
            orient = orientations[(i // 2) % len(orientations)]
            d = ramp_disparity(clear.shape[:2], orientation=orient)
            cases.append(make_eval_case(clear, "disparity", disparity=d,
                                        name=f"ramp-{orient}"))
    return cases


def l1_transmission(est: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute transmission difference over all pixels."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"transmission maps differ in shape: {est.shape} vs {gt.shape}")
    return float(np.abs(est - gt).mean())


def l1_image(dehazed: np.ndarray, clear: np.ndarray) -> float:
    """Mean absolute difference over all pixels and channels."""
    a = np.asarray(dehazed, dtype=np.float64)
    b = np.asarray(clear, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"images differ in shape: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


# --- method benchmarking ------------------------------------------------------

def noop_method(case: EvalCase):
    """Anchor baseline: output the hazy input untouched."""
    return case.hazy, None


def oracle_method(case: EvalCase):
    """Recovery with the true atmospheric light and transmission; lower-bounds
    every learned method on synthesized cases."""
    return recover(case.hazy, np.asarray(EVAL_LIGHT), case.t_map), case.t_map


def pipeline_method(net, forest, options: DehazeOptions | None = None):
    def run(case: EvalCase):
        result = dehaze(case.hazy, net, forest, options)
        return result.output, result.transmission
    return run


@dataclass
class ReportRow:
    label: str
    case: str
    l1_transmission: float | None = None
    l1_image: float | None = None
    runtime_s: float = 0.0
    failed: bool = False
    note: str = ""


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)

    def labels(self) -> list[str]:
        seen = []
        for row in self.rows:
            if row.label not in seen:
                seen.append(row.label)
        return seen

    def rows_for(self, label: str) -> list[ReportRow]:
        return [r for r in self.rows if r.label == label and not r.failed]

    def average(self, label: str) -> tuple[float | None, float | None]:
        rows = self.rows_for(label)

        def mean(values):
            values = [v for v in values if v is not None]
            return float(np.mean(values)) if values else None

        return (mean([r.l1_transmission for r in rows]),
                mean([r.l1_image for r in rows]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["label", "case", "l1_transmission", "l1_image",
                             "runtime_s", "failed", "note"])
            for r in self.rows:
                writer.writerow([
                    r.label, r.case,
                    "" if r.l1_transmission is None else f"{r.l1_transmission:.6f}",
                    "" if r.l1_image is None else f"{r.l1_image:.6f}",
                    f"{r.runtime_s:.3f}", int(r.failed), r.note])
            for label in self.labels():
                l1t, l1i = self.average(label)
                writer.writerow([label, "average",
                                 "" if l1t is None else f"{l1t:.6f}",
                                 "" if l1i is None else f"{l1i:.6f}", "", 0, ""])

    def to_text(self) -> str:
        def fmt(value):
            return "   -  " if value is None else f"{value:.4f}"

        lines = [f"{'label':<22} {'case':<16} {'L1 transm':>10} {'L1 image':>10} {'time s':>8}"]
        for r in self.rows:
            mark = " FAILED: " + r.note if r.failed else ""
            lines.append(f"{r.label:<22} {r.case:<16} {fmt(r.l1_transmission):>10} "
                         f"{fmt(r.l1_image):>10} {r.runtime_s:>8.2f}{mark}")
        for label in self.labels():
            l1t, l1i = self.average(label)
            lines.append(f"{label:<22} {'average':<16} {fmt(l1t):>10} {fmt(l1i):>10}")
        return "\n".join(lines)


def benchmark_methods(cases: list[EvalCase], methods: dict) -> EvalReport:
    """Run every method on every case; failures are flagged and excluded from averages."""
    if not cases or not methods:
        raise ValueError("need at least one case and one method")
    report = EvalReport()
    for label, method in methods.items():
        for case in cases:
            t0 = time.perf_counter()
            try:
                out, t_est = method(case)
                row = ReportRow(
                    label=label, case=case.name,
                    l1_transmission=(None if t_est is None
                                     else l1_transmission(t_est, case.t_map)),
                    l1_image=l1_image(out, case.clear),
                    runtime_s=time.perf_counter() - t0)
            except Exception as exc:
                row = ReportRow(label=label, case=case.name, failed=True,
                                runtime_s=time.perf_counter() - t0, note=str(exc))
            report.rows.append(row)
    return report


# --- training-time comparisons -------------------------------------------------

@dataclass
class AblationConfig:
    dataset: PatchDataset
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    val_frac: float = 0.1
    forest_trees: int = 60
    forest_samples: int = 4000
    threads: int = 1
    data_fracs: tuple = (0.5, 1.0)


def _features(net: NetworkModel, x: np.ndarray, tap: str, batch: int = 1024) -> np.ndarray:
    out = [net.features(x[s:s + batch], tap) for s in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.empty((0, 0))


def _fit_arm_regressor(kind: str, feats: np.ndarray, t: np.ndarray,
                       cfg: AblationConfig):
    pick = np.random.default_rng(cfg.seed).choice(
        len(feats), size=min(cfg.forest_samples, len(feats)), replace=False)
    if kind == "forest":
        return fit_forest(feats[pick], t[pick],
                          ForestConfig(n_trees=cfg.forest_trees, seed=cfg.seed),
                          threads=cfg.threads)
    return fit_baseline(kind, feats[pick], t[pick], seed=cfg.seed)


def _train_classifier_arm(placement: str, cfg: AblationConfig,
                          x: np.ndarray, labels: np.ndarray) -> NetworkModel:
    net = build_network(placement, seed=cfg.seed)
    run_sgd(net, x, labels,
            TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                        rng_seed=cfg.seed))
    net.trained = True
    return net


def _train_regression_arm(placement: str, cfg: AblationConfig,
                          x: np.ndarray, t: np.ndarray) -> NetworkModel:
    """The end-to-end comparison variant: the 10-way output layer is swapped
    for a single linear unit trained with squared error on the transmission."""
    net = build_network(placement, seed=cfg.seed)
    head_rng = np.random.default_rng([cfg.seed, 271])
    net.layers[-1] = Dense(64, 1, head_rng, name="out")
    run_sgd(net, x, t,
            TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                        rng_seed=cfg.seed),
            loss_fn=squared_loss)
    net.trained = True
    return net


def assert_single_factor(configs: dict[str, dict], factor: str) -> None:
    """Arms must agree on everything except `factor` (and their own label)."""
    items = list(configs.items())
    for (la, ca), (lb, cb) in zip(items, items[1:]):
        diff = {k for k in set(ca) | set(cb) if ca.get(k) != cb.get(k)}
        if diff - {factor}:
            raise AssertionError(
                f"arms {la!r} and {lb!r} differ in {sorted(diff)}, expected only {factor!r}")


def run_ablation(name: str, config: AblationConfig) -> EvalReport:
    """Train the arms of one comparison and report held-out transmission L1."""
    if name not in ABLATIONS:
        raise ValueError(f"ablation must be one of {ABLATIONS}, got {name!r}")
    ds = config.dataset
    x = np.ascontiguousarray(ds.hazy, dtype=np.float32)
    labels = np.asarray(ds.labels)
    t = np.asarray(ds.t)
    train_idx, val_idx = split_validation(len(ds), config.seed, config.val_frac)
    if len(val_idx) == 0:
        raise ValueError("validation split is empty; raise val_frac or dataset size")

    base = {"placement": "pool1", "tap": "fc2", "regressor": "forest",
            "head": "two-stage", "data_frac": 1.0, "epochs": config.epochs,
            "batch_size": config.batch_size, "seed": config.seed}
    if name == "ranking-vs-plain":
        arms = {"ranking": {**base}, "plain": {**base, "placement": "none"}}
        factor = "placement"
    elif name == "placement":
        arms = {f"after-{p}": {**base, "placement": p}
                for p in ("conv1", "pool1", "conv2", "conv3", "pool2")}
        factor = "placement"
    elif name == "feature-layer":
        arms = {f"tap-{tp}": {**base, "tap": tp} for tp in ("pool2", "fc1", "fc2")}
        factor = "tap"
    elif name == "regressor":
        arms = {kind: {**base, "regressor": kind}
                for kind in ("forest", "linear", "logistic-link", "kernel")}
        factor = "regressor"
    elif name == "end-to-end":
        arms = {"two-stage": {**base}, "end-to-end": {**base, "head": "regression"}}
        factor = "head"
    else:  # data-size
        arms = {f"frac-{fr:g}": {**base, "data_frac": fr} for fr in config.data_fracs}
        factor = "data_frac"
    assert_single_factor(arms, factor)

    report = EvalReport()
    trained: dict[tuple, NetworkModel] = {}
    for label, arm in arms.items():
        t0 = time.perf_counter()
        try:
            n_use = int(round(arm["data_frac"] * len(train_idx)))
            use = train_idx[:n_use]
            if arm["head"] == "regression":
                net = _train_regression_arm(arm["placement"], config, x[use], t[use])
                pred = np.clip(net.forward(x[val_idx])[:, 0], 1e-6, 1.0)
            else:
                key = (arm["placement"], arm["data_frac"])
                if key not in trained:
                    trained[key] = _train_classifier_arm(arm["placement"], config,
                                                         x[use], labels[use])
                net = trained[key]
                feats_tr = _features(net, x[use], arm["tap"])
                feats_va = _features(net, x[val_idx], arm["tap"])
                reg = _fit_arm_regressor(arm["regressor"], feats_tr, t[use], config)
                pred = np.asarray(reg.predict(feats_va))
            report.rows.append(ReportRow(
                label=label, case=name,
                l1_transmission=float(np.abs(pred - t[val_idx]).mean()),
                runtime_s=time.perf_counter() - t0))
        except Exception as exc:
            report.rows.append(ReportRow(label=label, case=name, failed=True,
                                         runtime_s=time.perf_counter() - t0,
                                         note=str(exc)))
    return report
