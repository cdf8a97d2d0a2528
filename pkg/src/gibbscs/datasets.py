"""Synthetic grayscale corpora and image file I/O.

Images are processed internally as float64 arrays scaled to [0, 1].
Files are 8-bit grayscale PNG or binary PGM; writing quantizes by
rounding, so a write/read round trip moves a pixel by at most half a
quantization step.
"""

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .errors import DataFileError, InvalidInputError

_SUFFIXES = (".png", ".pgm")


def synthetic_images(count, shape=(64, 64), seed=0):
    """Deterministic piecewise-smooth test images in [0, 1].

    Each image is a gentle intensity ramp with a handful of constant
    rectangles and disks added, lightly blurred so edges span a pixel
    or two.
    """
    if count < 1:
        raise InvalidInputError("count must be at least 1")
    h, w = int(shape[0]), int(shape[1])
    if h < 4 or w < 4:
        raise InvalidInputError("images must be at least 4x4")
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:h, 0:w]
    yy = rows / max(h, w)
    xx = cols / max(h, w)
    out = np.empty((count, h, w))
    for i in range(count):
        img = rng.uniform(0.3, 0.7) + rng.uniform(-0.4, 0.4) * xx \
            + rng.uniform(-0.4, 0.4) * yy
        for _ in range(int(rng.integers(3, 7))):
            r0 = int(rng.integers(0, h))
            c0 = int(rng.integers(0, w))
            rh = int(rng.integers(max(h // 8, 2), h // 2 + 1))
            cw = int(rng.integers(max(w // 8, 2), w // 2 + 1))
            img[r0 : r0 + rh, c0 : c0 + cw] += rng.uniform(-0.45, 0.45)
        for _ in range(int(rng.integers(1, 4))):
            cy = rng.uniform(0, h)
            cx = rng.uniform(0, w)
            radius = rng.uniform(min(h, w) / 10, min(h, w) / 4)
            disk = (rows - cy) ** 2 + (cols - cx) ** 2 < radius ** 2
            img[disk] += rng.uniform(-0.4, 0.4)
        img = gaussian_filter(img, sigma=0.8, mode="reflect")
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def _check_unit_image(image):
    arr = np.asarray(image, dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidInputError("image must be a non-empty 2-D array")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("image must be finite")
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise InvalidInputError("image values must lie in [0, 1]")
    return np.clip(arr, 0.0, 1.0)


def write_image(path, image):
    """Write a [0, 1] image as 8-bit PNG or PGM, chosen by suffix."""
    path = Path(path)
    if path.suffix.lower() not in _SUFFIXES:
        raise InvalidInputError(
            f"unsupported image suffix {path.suffix!r}; use .png or .pgm"
        )
    arr = _check_unit_image(image)
    quantized = np.round(arr * 255.0).astype(np.uint8)
    pil = Image.fromarray(quantized, mode="L")
    fmt = "PNG" if path.suffix.lower() == ".png" else "PPM"
    try:
        pil.save(path, format=fmt)
    except OSError as exc:
        raise DataFileError(f"cannot write image {path}: {exc}") from exc


def read_image(path):
    """Read a grayscale image file into a float64 array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as pil:
            arr = np.asarray(pil.convert("L"), dtype=np.float64)
    except FileNotFoundError as exc:
        raise DataFileError(f"image file not found: {path}") from exc
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DataFileError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def load_images(directory):
    """Read every .png/.pgm in a directory, sorted by file name.

    Returns a list of (file name, array) pairs.  Raises if the
    directory holds no images or any image fails to read; the error
    message names each offending file.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFileError(f"not a directory: {directory}")
    paths = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in _SUFFIXES
    )
    if not paths:
        raise DataFileError(f"no .png or .pgm images found in {directory}")
    loaded = []
    failures = []
    for p in paths:
        try:
            loaded.append((p.name, read_image(p)))
        except DataFileError as exc:
            failures.append(f"{p.name}: {exc}")
    if failures:
        raise DataFileError(
            "unreadable images: " + "; ".join(failures)
        )
    return loaded
