"""Image arrays, lossless file I/O and random patch extraction.

Images are ``float32`` numpy arrays of shape ``(H, W, C)`` with ``C`` in
``{1, 3}`` (RGB order) and values in ``[0, 1]``.  Only PNG and binary
PPM/PGM are read or written so that round trips are bit exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DimensionError, ImageFormatError, ImageLoadError

SUPPORTED_FORMATS = ("PNG", "PPM")
SUPPORTED_SUFFIXES = {".png": "PNG", ".ppm": "PPM", ".pgm": "PPM", ".pnm": "PPM"}


def as_image(data, copy: bool = False) -> np.ndarray:
    """Validate ``data`` as an image array and return it as ``float32`` HxWxC.

    2-D input is promoted to a single channel.  Values must already lie in
    ``[0, 1]``; use :func:`clamp` first if they might not.
    """
    arr = np.array(data, dtype=np.float32, copy=copy) if copy else np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DimensionError(f"expected HxWx1 or HxWx3 image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"image has zero extent: {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must be finite and lie in [0, 1]")
    return arr


def clamp(data) -> np.ndarray:
    return np.clip(np.asarray(data, dtype=np.float32), 0.0, 1.0)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ImageLoadError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in SUPPORTED_FORMATS:
                raise ImageFormatError(f"{path}: unsupported format {fmt!r} (PNG or PPM only)")
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                if mode == "P":
                    im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                    mode = im.mode
                if mode in ("RGBA", "LA"):
                    im = im.convert(mode[:-1])
                    mode = im.mode
                if mode not in ("L", "RGB", "1"):
                    raise ImageFormatError(f"{path}: unsupported pixel mode {mode!r}")
                if mode == "1":
                    im = im.convert("L")
                arr = np.asarray(im, dtype=np.float64) / 255.0
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a recognised raster image") from exc
    if arr.size == 0:
        raise ImageFormatError(f"{path}: image has zero extent")
    return as_image(arr.astype(np.float32))


def quantize(img, depth: int = 8) -> np.ndarray:
    """Clamp to ``[0, 1]`` and round half up onto the integer code grid."""
    top = (1 << depth) - 1
    codes = np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * top + 0.5)
    return codes.astype(np.uint16 if depth > 8 else np.uint8)


def save_image(img, path) -> None:
    path = Path(path)
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"cannot save array of shape {arr.shape} as an image")
    fmt = SUPPORTED_SUFFIXES.get(path.suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"{path}: unsupported output suffix (use .png or .ppm)")
    codes = quantize(arr)
    pil = Image.fromarray(codes[:, :, 0], mode="L") if codes.shape[2] == 1 else Image.fromarray(codes, mode="RGB")
    try:
        pil.save(path, format=fmt)
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc


def list_images(directory) -> list[Path]:
    """Sorted list of files in ``directory`` with a supported suffix."""
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in SUPPORTED_SUFFIXES)


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int
    stride: int = 1

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be positive")


def extract_patches(img, spec: PatchSpec, rng_seed: int, count: int = 1) -> list[np.ndarray]:
    """Cut ``count`` randomly placed square patches out of ``img``.

    Patch corners are drawn on the ``spec.stride`` lattice; the draw is a
    pure function of ``rng_seed``.
    """
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    p = spec.patch_size
    if p > h or p > w:
        raise DimensionError(f"patch size {p} exceeds image size {h}x{w}")
    rng = np.random.default_rng(rng_seed)
    ys = rng.integers(0, (h - p) // spec.stride + 1, size=count) * spec.stride
    xs = rng.integers(0, (w - p) // spec.stride + 1, size=count) * spec.stride
    return [img[y:y + p, x:x + p].copy() for y, x in zip(ys, xs)]
