"""End-to-end single-image dehazing.

Stages: estimate the atmospheric light A from the dark channel, white-balance
the input by A, regress a per-pixel transmission from patch features, smooth
it with a guided filter, invert the scattering model (with the transmission
floored at 0.05), and finally raise the exposure by a log-compressed
luminance ratio. All intermediates are kept on the result for inspection.

Images are (H, W, 3) float32 in [0, 1]; transmission maps (H, W) float32 in
(0, 1].
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .network import PATCH_SHAPE

# Lowest value a transmission map may carry; keeps (0, 1] invariants strict
# without affecting recovery, which floors at t_floor anyway.
T_EPS = 1e-6


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"dehazing failed in stage {stage!r}: {cause}")
        self.stage = stage


@dataclass
class DehazeOptions:
    """Pipeline knobs. `gf_radius` is the guided-filter radius for full-size
    photos; the pipeline caps it at a fifth of the smaller image dimension so
    small images keep object-scale smoothing instead of a global fit."""

    dark_window: int = 15
    gf_radius: int = 40
    gf_eps: float = 1e-3
    stride: int = 1
    t_floor: float = 0.05
    batch: int = 1024
    threads: int = 1
    exposure_cap: float = 10.0

    def effective_radius(self, height: int, width: int) -> int:
        return min(self.gf_radius, max(2, min(height, width) // 5))


@dataclass
class DehazeResult:
    output: np.ndarray
    transmission: np.ndarray
    transmission_raw: np.ndarray
    atmospheric_light: np.ndarray
    white_balanced: np.ndarray
    exposure: float


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec.601 luma: 0.299 R + 0.587 G + 0.114 B."""
    img = np.asarray(image, dtype=np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def dark_channel(image: np.ndarray, window: int = 15) -> np.ndarray:
    """Per-pixel minimum over the RGB channels and a window x window
    neighbourhood, with windows clipped at the image border."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    img = np.asarray(image)
    mins = img.min(axis=2)
    r = window // 2
    if r == 0:
        return mins.astype(np.float32)
    padded = np.pad(mins, r, mode="edge")
    rows = np.lib.stride_tricks.sliding_window_view(padded, window, axis=1).min(axis=-1)
    out = np.lib.stride_tricks.sliding_window_view(rows, window, axis=0).min(axis=-1)
    return np.ascontiguousarray(out, dtype=np.float32)


def estimate_atmospheric_light(image: np.ndarray, *, window: int = 15,
                               floor: float = 1e-3) -> np.ndarray:
    """Mean RGB of the 0.1% (at least one) pixels with the largest dark-channel
    values; ties resolved by row-major pixel index. Channels are floored so the
    later per-channel division stays defined."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.size == 0:
        raise ValueError(f"expected a nonempty (H, W, 3) image, got {img.shape}")
    dark = dark_channel(img, window).reshape(-1)
    n_pixels = dark.size
    k = max(1, int(np.ceil(0.001 * n_pixels)))
    order = np.argsort(-dark, kind="stable")[:k]
    a = img.reshape(-1, 3)[order].mean(axis=0)
    return np.maximum(a, floor).astype(np.float32)


def white_balance(image: np.ndarray, light: np.ndarray) -> np.ndarray:
    """Divide each channel by the matching channel of the atmospheric light.

    The result can exceed 1 and is left unclamped; its transmission equals
    that of the input.
    """
    a = np.asarray(light, dtype=np.float64)
    if a.shape != (3,) or a.min() <= 0.0:
        raise ValueError("atmospheric light must be a positive RGB triple")
    return (np.asarray(image, dtype=np.float64) / a).astype(np.float32)


def transmission_map(image: np.ndarray, net, forest, *, stride: int = 1,
                     batch: int = 1024, threads: int = 1) -> np.ndarray:
    """Per-pixel transmission: run the feature extractor and the regressor on
    the 20x20 patch centred at each pixel (reflect padding at borders).

    `stride` > 1 evaluates a subgrid and fills the gaps with the nearest
    computed value. The output is identical for any `threads` value; rows are
    assembled by index.
    """
    if not getattr(net, "trained", False):
        raise ValueError("network has not been trained")
    if forest is None:
        raise ValueError("regression model is required")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    _, psz, _ = PATCH_SHAPE
    before, after = (psz - 1) // 2, psz // 2
    padded = np.pad(img, ((before, after), (before, after), (0, 0)), mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (psz, psz), axis=(0, 1))
    sub = windows[::stride, ::stride]
    hs, ws = sub.shape[:2]
    small = np.empty((hs, ws), dtype=np.float32)

    rows_per_chunk = max(1, batch // ws)
    chunks = [(r, min(r + rows_per_chunk, hs)) for r in range(0, hs, rows_per_chunk)]

    def fill(span):
        r0, r1 = span
        patches = np.ascontiguousarray(sub[r0:r1], dtype=np.float32)
        patches = patches.reshape(-1, *PATCH_SHAPE)
        feats = net.features(patches)
        small[r0:r1] = forest.predict(feats).reshape(r1 - r0, ws)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, chunks))
    else:
        for span in chunks:
            fill(span)

    if stride == 1:
        full = small
    else:
        gy = np.clip(np.round(np.arange(h) / stride).astype(int), 0, hs - 1)
        gx = np.clip(np.round(np.arange(w) / stride).astype(int), 0, ws - 1)
        full = small[gy][:, gx]
    return np.clip(full, T_EPS, 1.0)


def _box_mean(values: np.ndarray, radius: int) -> np.ndarray:
    """Mean over (2r+1)^2 windows clipped at the border, via an integral image."""
    h, w = values.shape
    integ = np.zeros((h + 1, w + 1), dtype=np.float64)
    integ[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)
    y0 = np.clip(np.arange(h) - radius, 0, None)
    y1 = np.clip(np.arange(h) + radius + 1, None, h)
    x0 = np.clip(np.arange(w) - radius, 0, None)
    x1 = np.clip(np.arange(w) + radius + 1, None, w)
    sums = (integ[y1][:, x1] - integ[y0][:, x1] - integ[y1][:, x0] + integ[y0][:, x0])
    counts = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return sums / counts


def guided_filter(guide: np.ndarray, target: np.ndarray, radius: int = 40,
                  eps: float = 1e-3) -> np.ndarray:
    """Edge-preserving smoothing of `target` by local linear models of `guide`.

    Per window: a = cov(guide, target) / (var(guide) + eps), b = mean(target)
    - a * mean(guide); the coefficients are then box-averaged and the output
    is a*guide + b, clamped into (0, 1].
    """
    g = np.asarray(guide, dtype=np.float64)
    p = np.asarray(target, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError(f"guide {g.shape} and target {p.shape} dimensions differ")
    mg = _box_mean(g, radius)
    mp = _box_mean(p, radius)
    cov = _box_mean(g * p, radius) - mg * mp
    var = _box_mean(g * g, radius) - mg * mg
    a = cov / (var + eps)
    b = mp - a * mg
    q = _box_mean(a, radius) * g + _box_mean(b, radius)
    return np.clip(q, T_EPS, 1.0).astype(np.float32)


def recover(image: np.ndarray, light: np.ndarray, t_map: np.ndarray, *,
            t_floor: float = 0.05, clip: bool = True) -> np.ndarray:
    """Invert the scattering model: J = (I - A) / max(t, t_floor) + A.

    With `clip` the result is clamped to [0, 1] (the shipped output);
    without, the raw radiance is returned for round-trip checks.
    """
    img = np.asarray(image, dtype=np.float64)
    t = np.asarray(t_map, dtype=np.float64)
    if t.shape != img.shape[:2]:
        raise ValueError(f"transmission {t.shape} does not match image {img.shape[:2]}")
    a = np.asarray(light, dtype=np.float64)
    j = (img - a) / np.maximum(t, t_floor)[..., None] + a
    if clip:
        j = np.clip(j, 0.0, 1.0)
    return j.astype(np.float32)


def exposure_adjust(dehazed: np.ndarray, original: np.ndarray, *,
                    cap: float = 10.0) -> tuple[np.ndarray, float]:
    """Scale the dehazed image by lam = max(1, log(lum(I)/lum(J)) + 1).

    Dehazing darkens the scene when the input was exposed for haze; the log
    keeps the boost below the raw luminance ratio. An all-black result would
    make the ratio blow up, so lam is capped (with a warning).
    """
    sum_i = float(luminance(original).sum())
    sum_j = float(luminance(dehazed).sum())
    if sum_i <= 0.0:
        raise ValueError("original image has no luminance")
    if sum_j <= 0.0:
        warnings.warn(f"dehazed image is black; exposure capped at {cap}")
        lam = cap
    else:
        lam = np.log(sum_i / sum_j) + 1.0
        lam = float(min(max(lam, 1.0), cap))
    out = np.clip(np.asarray(dehazed, dtype=np.float64) * lam, 0.0, 1.0)
    return out.astype(np.float32), lam


def dehaze(image: np.ndarray, net, forest,
           options: DehazeOptions | None = None) -> DehazeResult:
    """Run the full chain and return the output with all intermediates."""
    opt = options or DehazeOptions()

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            raise PipelineStageError(name, exc) from exc

    img = np.asarray(image, dtype=np.float32)
    light = stage("estimate_atmospheric_light", estimate_atmospheric_light,
                  img, window=opt.dark_window)
    balanced = stage("white_balance", white_balance, img, light)
    t_raw = stage("transmission_map", transmission_map, balanced, net, forest,
                  stride=opt.stride, batch=opt.batch, threads=opt.threads)
    guide = luminance(img)
    t_ref = stage("guided_filter", guided_filter, guide, t_raw,
                  radius=opt.effective_radius(*img.shape[:2]), eps=opt.gf_eps)
    recovered = stage("recover", recover, img, light, t_ref, t_floor=opt.t_floor)
    output, lam = stage("exposure_adjust", exposure_adjust, recovered, img,
                        cap=opt.exposure_cap)
    return DehazeResult(output=output, transmission=t_ref, transmission_raw=t_raw,
                        atmospheric_light=light, white_balanced=balanced,
                        exposure=lam)
