"""Training-corpus synthesis.

Clear 20x20 RGB patches are sampled from user-supplied images (or from the
procedural generator below, which keeps CI hermetic), then hazed with the
scattering model: hazy = clear * t + A * (1 - t), one constant transmission t
per patch, atmospheric light A = (1, 1, 1) during training. t is drawn as
1 - u with u uniform on [0, 1), so it lands exactly in (0, 1].

Dataset files (magic "RCDS") store float32 patch data verbatim, so a round
trip is bit-exact and the synthesis identity still holds after reloading.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .network import bin_labels

_DATASET_MAGIC = b"RCDS"
_DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass
class PatchSample:
    """One training sample: clear/hazy 3x20x20 patches, transmission, 1-based bin."""

    clear: np.ndarray
    hazy: np.ndarray
    t: float
    label: int


class PatchDataset:
    """Column-stored patch samples plus provenance; indexing yields PatchSample views."""

    def __init__(self, clear: np.ndarray, hazy: np.ndarray, t: np.ndarray,
                 labels: np.ndarray, provenance: dict | None = None):
        self.clear = np.asarray(clear, dtype=np.float32)
        self.hazy = np.asarray(hazy, dtype=np.float32)
        self.t = np.asarray(t, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.uint8)
        self.provenance = dict(provenance or {})
        n = len(self.t)
        if not (len(self.clear) == len(self.hazy) == len(self.labels) == n):
            raise ValueError("column lengths disagree")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> PatchSample:
        return PatchSample(self.clear[i], self.hazy[i], float(self.t[i]),
                           int(self.labels[i]))

    def bin_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=11)[1:]


# --- procedural clear images -------------------------------------------------

def _img_gradient(rng, size):
    ang = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    ramp = np.cos(ang) * xx + np.sin(ang) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    dark = rng.uniform(0.0, 0.3, 3)
    bright = rng.uniform(0.5, 1.0, 3)
    return (dark + ramp[..., None] * (bright - dark)).astype(np.float32)


def _img_checker(rng, size):
    cell = int(rng.integers(2, 9))
    dark = rng.uniform(0.0, 0.2, 3)
    bright = rng.uniform(0.45, 1.0, 3)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = ((yy // cell + xx // cell) % 2).astype(bool)
    img = np.where(mask[..., None], bright, dark)
    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _img_noise(rng, size):
    k = int(rng.choice([2, 4, 8]))
    coarse = rng.random((size // k + 1, size // k + 1, 3))
    up = np.repeat(np.repeat(coarse, k, axis=0), k, axis=1)[:size, :size]
    fine = rng.random((size, size, 3))
    w = rng.uniform(0.15, 0.45)
    img = (1.0 - w) * up + w * fine
    lo = rng.uniform(0.0, 0.15)
    hi = rng.uniform(0.6, 1.0)
    img = lo + (hi - lo) * (img - img.min()) / max(np.ptp(img), 1e-9)
    return img.astype(np.float32)


def _img_grass(rng, size):
    strands = rng.random(size)
    strands = np.convolve(strands, np.ones(3) / 3.0, mode="same")
    tex = 0.6 * np.tile(strands, (size, 1)) + 0.4 * rng.random((size, size))
    tex = tex ** 1.5
    color = np.array([rng.uniform(0.05, 0.3), rng.uniform(0.45, 0.95),
                      rng.uniform(0.05, 0.3)])
    return np.clip(tex[..., None] * color, 0.0, 1.0).astype(np.float32)


def _img_fence(rng, size):
    base = rng.uniform(0.55, 0.95, 3)
    yy = np.mgrid[0:size] / max(size - 1, 1)
    img = np.empty((size, size, 3))
    img[:] = base
    img *= (0.85 + 0.15 * yy)[:, None, None]
    pitch = int(rng.integers(4, 11))
    width = int(rng.integers(1, min(3, pitch - 1) + 1))
    slat = (np.arange(size) % pitch) < width
    dark = rng.uniform(0.02, 0.2, 3)
    img[:, slat] = dark
    rail = int(rng.integers(0, size - 2))
    img[rail:rail + 2] = dark * 0.9
    img = img + rng.normal(0.0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _img_specks(rng, size):
    # sparse dark specks over a bright field; chaotic layout, informative
    # value distribution
    base = 0.55 + 0.45 * rng.random(3)
    img = np.tile(base, (size, size, 1)) * (0.88 + 0.12 * rng.random((size, size, 1)))
    n = int(rng.integers(size * size // 40, size * size // 8))
    ys = rng.integers(0, size, n)
    xs = rng.integers(0, size, n)
    dark = rng.uniform(0.0, 0.15, 3)
    r = int(rng.integers(1, 3))
    for dy in range(r):
        for dx in range(r):
            img[np.minimum(ys + dy, size - 1), np.minimum(xs + dx, size - 1)] = dark
    img = img + rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _add_highlight(rng, img):
    # a bright near-white region (sky, clouds, a lit wall), large enough to
    # dominate a dark-channel window
    size = img.shape[0]
    h = int(rng.integers(max(size // 4, 2), size // 2 + 1))
    w = int(rng.integers(max(size // 4, 2), size // 2 + 1))
    y = int(rng.integers(0, size - h + 1))
    x = int(rng.integers(0, size - w + 1))
    white = rng.uniform(0.9, 1.0, 3)
    img[y:y + h, x:x + w] = np.maximum(img[y:y + h, x:x + w],
                                       white.astype(img.dtype))
    return img


# noise and specks appear twice: distribution-heavy textures carry the most
# transmission signal at small corpus sizes
_FAMILIES = (_img_gradient, _img_checker, _img_noise, _img_grass, _img_fence,
             _img_specks, _img_noise, _img_specks)


def make_procedural_images(count: int, size: int = 64, seed: int = 0,
                           highlight_frac: float = 0.5) -> list[np.ndarray]:
    """Deterministic clear-image corpus: gradient, checkerboard, colored-noise,
    grass, fence and speck textures, cycled in a fixed order.

    `highlight_frac` of the images get a near-white region the way natural
    scenes carry sky or lit surfaces; atmospheric-light estimation relies on
    those, so evaluation scenes usually want 1.0 here.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng([int(seed), 3571])
    images = []
    for i in range(count):
        img = _FAMILIES[i % len(_FAMILIES)](rng, size)
        if rng.random() < highlight_frac:
            _add_highlight(rng, img)
        images.append(img)
    return images


# --- patch sampling and hazing ----------------------------------------------

def sample_clear_patches(images, count: int, size: int = 20, rng=0) -> np.ndarray:
    """Sample `count` random size x size patches, channel-first, values in [0, 1].

    The source image and the top-left corner are both uniform. Images smaller
    than the patch are skipped with a warning; with no usable image left the
    call is rejected.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = _as_rng(rng)
    usable = []
    skipped = 0
    for im in images:
        arr = np.asarray(im, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"images must be (H, W, 3), got {arr.shape}")
        if arr.shape[0] < size or arr.shape[1] < size:
            skipped += 1
            continue
        usable.append(arr)
    if skipped:
        warnings.warn(f"skipped {skipped} image(s) smaller than {size}x{size}")
    if not usable:
        raise ValueError(f"no usable image of at least {size}x{size}")
    out = np.empty((count, 3, size, size), dtype=np.float32)
    for i in range(count):
        im = usable[int(rng.integers(len(usable)))]
        y = int(rng.integers(im.shape[0] - size + 1))
        x = int(rng.integers(im.shape[1] - size + 1))
        out[i] = im[y:y + size, x:x + size].transpose(2, 0, 1)
    return out


def synthesize_hazy(clear: np.ndarray, t, light=(1.0, 1.0, 1.0), *,
                    channel_axis: int = 0) -> np.ndarray:
    """Convex combination of scene radiance and atmospheric light.

    `t` is a scalar transmission or a per-pixel map matching the spatial
    dims. `channel_axis` 0 handles (3, H, W) patches, -1 handles (H, W, 3)
    images. The result keeps the input dtype; arithmetic runs in float64.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.size == 0 or t_arr.min() <= 0.0 or t_arr.max() > 1.0:
        raise ValueError("transmission must lie in (0, 1]")
    clear = np.asarray(clear)
    a = np.asarray(light, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"light must be an RGB triple, got shape {a.shape}")
    if channel_axis == 0:
        a = a[:, None, None]
        t_b = t_arr if t_arr.ndim == 0 else t_arr[None, :, :]
    elif channel_axis in (-1, 2):
        t_b = t_arr if t_arr.ndim == 0 else t_arr[:, :, None]
    else:
        raise ValueError("channel_axis must be 0 or -1")
    hazy = clear.astype(np.float64) * t_b + a * (1.0 - t_b)
    return hazy.astype(clear.dtype, copy=False)


def build_dataset(clear_patches: np.ndarray, per_patch: int = 10, rng=0,
                  light=(1.0, 1.0, 1.0), provenance: dict | None = None) -> PatchDataset:
    """Haze each clear patch `per_patch` times with fresh uniform transmissions."""
    if per_patch < 1:
        raise ValueError("per_patch must be >= 1")
    rng_in = rng
    rng = _as_rng(rng)
    clear = np.asarray(clear_patches, dtype=np.float32)
    n = len(clear) * per_patch
    t = 1.0 - rng.random(n)
    a = np.asarray(light, dtype=np.float64)
    clear_rep = np.repeat(clear, per_patch, axis=0)
    hazy = (clear_rep.astype(np.float64) * t[:, None, None, None]
            + a[None, :, None, None] * (1.0 - t)[:, None, None, None]).astype(np.float32)
    labels = bin_labels(t)
    prov = {"n_clear_patches": int(len(clear)), "per_patch": int(per_patch),
            "n_samples": int(n), "light": [float(v) for v in a]}
    if not isinstance(rng_in, np.random.Generator):
        prov["seed"] = int(rng_in)
    prov.update(provenance or {})
    return PatchDataset(clear_rep, hazy, t, labels, prov)


# --- dataset file format ------------------------------------------------------
#
# Little-endian:
#   magic "RCDS" | u32 version | u64 n_samples | u16 channels | u16 patch_size
#   n_samples records of: clear float32[c*s*s] | hazy float32[c*s*s]
#                         | t float64 | label u8
#   u32 provenance_len | provenance UTF-8 JSON

def _record_dtype(channels: int, size: int) -> np.dtype:
    return np.dtype([("clear", "<f4", (channels, size, size)),
                     ("hazy", "<f4", (channels, size, size)),
                     ("t", "<f8"), ("label", "u1")])


def write_dataset(path, dataset: PatchDataset) -> None:
    n = len(dataset)
    channels, size = dataset.clear.shape[1], dataset.clear.shape[2]
    rec = np.empty(n, dtype=_record_dtype(channels, size))
    rec["clear"] = dataset.clear
    rec["hazy"] = dataset.hazy
    rec["t"] = dataset.t
    rec["label"] = dataset.labels
    prov = json.dumps(dataset.provenance, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_DATASET_MAGIC)
        f.write(struct.pack("<IQHH", _DATASET_VERSION, n, channels, size))
        f.write(rec.tobytes())
        f.write(struct.pack("<I", len(prov)))
        f.write(prov)


def read_dataset(path) -> PatchDataset:
    blob = open(path, "rb").read()
    off = 0

    def take(count, what):
        nonlocal off
        if off + count > len(blob):
            raise DatasetFormatError(
                f"{path}: truncated while reading {what} at offset {off} "
                f"(needed {count} bytes, have {len(blob) - off})")
        out = blob[off:off + count]
        off += count
        return out

    if take(4, "magic") != _DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a patch dataset file (bad magic)")
    version, n, channels, size = struct.unpack("<IQHH", take(16, "header"))
    if version != _DATASET_VERSION:
        raise DatasetFormatError(
            f"{path}: file version {version}, this reader supports {_DATASET_VERSION}")
    dtype = _record_dtype(channels, size)
    rec = np.frombuffer(take(n * dtype.itemsize, f"{n} sample records"), dtype=dtype)
    (plen,) = struct.unpack("<I", take(4, "provenance length"))
    prov = json.loads(take(plen, "provenance").decode("utf-8")) if plen else {}
    if off != len(blob):
        raise DatasetFormatError(f"{path}: {len(blob) - off} trailing bytes at offset {off}")
    return PatchDataset(rec["clear"].copy(), rec["hazy"].copy(), rec["t"].copy(),
                        rec["label"].copy(), prov)
