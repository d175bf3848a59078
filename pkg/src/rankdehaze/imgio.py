"""Image file handling: PNG via Pillow, binary PPM (P6) hand-rolled.

In-memory images are (H, W, 3) float32 arrays in [0, 1]; grayscale maps are
(H, W) float32 in [0, 1]. 8-bit channels map through /255, 16-bit through
/65535.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    pass


def _read_ppm(path) -> np.ndarray:
    blob = open(path, "rb").read()
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            if blob[pos:pos + 1].isspace():
                pos += 1
            elif blob[pos:pos + 1] == b"#":
                while pos < len(blob) and blob[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PPM header")
        return blob[start:pos]

    if token() != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    width, height, maxval = int(token()), int(token()), int(token())
    pos += 1  # single whitespace after maxval
    if maxval < 1 or maxval > 65535:
        raise ImageFormatError(f"{path}: invalid maxval {maxval}")
    bytes_per = 1 if maxval < 256 else 2
    need = width * height * 3 * bytes_per
    raster = blob[pos:pos + need]
    if len(raster) != need:
        raise ImageFormatError(
            f"{path}: raster truncated, expected {need} bytes, got {len(raster)}")
    dtype = ">u2" if bytes_per == 2 else np.uint8
    arr = np.frombuffer(raster, dtype=dtype).reshape(height, width, 3)
    return (arr.astype(np.float32) / maxval).astype(np.float32)


def _write_ppm(path, arr8: np.ndarray) -> None:
    h, w, _ = arr8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr8.tobytes())


def read_image(path) -> np.ndarray:
    """Load an RGB image as (H, W, 3) float32 in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return _read_ppm(path)
    im = Image.open(path)
    if im.mode in ("I;16", "I"):
        arr = np.asarray(im, dtype=np.float32) / 65535.0
        return np.repeat(arr[..., None], 3, axis=2)
    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def write_image(path, image: np.ndarray) -> None:
    """Write (H, W, 3) values in [0, 1] as 8-bit PNG or binary PPM by extension."""
    path = Path(path)
    arr8 = (np.clip(np.asarray(image), 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if arr8.ndim != 3 or arr8.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {np.asarray(image).shape}")
    if path.suffix.lower() == ".ppm":
        _write_ppm(path, arr8)
    else:
        Image.fromarray(arr8).save(path, format="PNG")


def read_gray(path) -> np.ndarray:
    """Load a grayscale map as (H, W) float32 in [0, 1]; RGB inputs use Rec.601 luminance."""
    path = Path(path)
    if path.suffix.lower() != ".ppm":
        im = Image.open(path)
        if im.mode in ("I;16", "I"):
            return (np.asarray(im, dtype=np.float32) / 65535.0).astype(np.float32)
        if im.mode == "L":
            return (np.asarray(im, dtype=np.float32) / 255.0).astype(np.float32)
    rgb = read_image(path)
    return (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]).astype(np.float32)


def write_gray16(path, values: np.ndarray) -> None:
    """Write a [0, 1] map as a 16-bit grayscale PNG."""
    arr = (np.clip(np.asarray(values), 0.0, 1.0) * 65535.0).round().astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")
