"""Gaussian compressed-sensing measurements of grayscale images.

The operator is a dense matrix with i.i.d. N(0, 1/M) entries, M the
number of measurement rows, so columns have unit expected squared
norm.  Measuring flattens the image row-major.  Records carry enough
metadata (operator seed, dimensions, noise seed) to rebuild the
operator and reproduce the noise exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class MeasurementOperator:
    """Dense sensing matrix with the seed that generated it."""

    matrix: np.ndarray
    seed: int

    def __post_init__(self):
        mat = np.array(self.matrix, dtype=float)
        if mat.ndim != 2:
            raise InvalidInputError("sensing matrix must be 2-D")
        if mat.shape[0] < 1 or mat.shape[0] > mat.shape[1]:
            raise InvalidInputError(
                "measurement count must satisfy 1 <= M <= pixel count"
            )
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)

    @property
    def n_measurements(self):
        return self.matrix.shape[0]

    @property
    def n_pixels(self):
        return self.matrix.shape[1]


@dataclass(frozen=True)
class MeasurementRecord:
    """Measurement vector plus reproduction metadata.

    ``snr_db`` is None and ``noise_variance`` zero for noiseless
    records.
    """

    y: np.ndarray
    operator_seed: int
    n_measurements: int
    n_pixels: int
    image_shape: tuple
    snr_db: Optional[float] = None
    noise_seed: Optional[int] = None
    noise_variance: float = 0.0

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        if y.shape[0] != self.n_measurements:
            raise InvalidInputError("y length must equal the measurement count")
        shape = tuple(int(s) for s in self.image_shape)
        if len(shape) != 2 or shape[0] * shape[1] != self.n_pixels:
            raise InvalidInputError("image shape must multiply to the pixel count")
        y.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "image_shape", shape)


def make_gaussian_matrix(n_measurements, n_pixels, seed):
    """Draw the sensing operator with i.i.d. N(0, 1/M) entries."""
    if n_measurements < 1 or n_measurements > n_pixels:
        raise InvalidInputError(
            f"need 1 <= measurements <= pixels, got {n_measurements} > {n_pixels}"
        )
    rng = np.random.default_rng(seed)
    matrix = rng.normal(0.0, 1.0 / np.sqrt(n_measurements),
                        size=(n_measurements, n_pixels))
    return MeasurementOperator(matrix, seed=int(seed))


def measurement_count_for_ratio(n_pixels, ratio):
    """Measurement count for a measurement ratio in (0, 1]."""
    if not 0.0 < ratio <= 1.0:
        raise InvalidInputError(f"measurement ratio must lie in (0, 1], got {ratio}")
    count = int(round(ratio * n_pixels))
    return max(count, 1)


def measure(operator, image):
    """Apply the operator to a row-major flattened image."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.size != operator.n_pixels:
        raise InvalidInputError(
            f"image with {image.size} pixels does not match operator "
            f"({operator.n_pixels} columns)"
        )
    y = operator.matrix @ image.ravel()
    return MeasurementRecord(
        y=y,
        operator_seed=operator.seed,
        n_measurements=operator.n_measurements,
        n_pixels=operator.n_pixels,
        image_shape=image.shape,
    )


def add_noise_snr(record, snr_db, seed):
    """Add white Gaussian noise at a target SNR in dB.

    The noise variance is ||y||^2 / (M * 10^(snr_db/10)); a zero
    measurement vector has no defined SNR and is rejected.
    """
    power = float(record.y @ record.y)
    if power == 0.0:
        raise InvalidInputError("cannot set an SNR for an all-zero measurement")
    variance = power / (record.n_measurements * 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    noisy = record.y + rng.normal(0.0, np.sqrt(variance), size=record.n_measurements)
    return MeasurementRecord(
        y=noisy,
        operator_seed=record.operator_seed,
        n_measurements=record.n_measurements,
        n_pixels=record.n_pixels,
        image_shape=record.image_shape,
        snr_db=float(snr_db),
        noise_seed=int(seed),
        noise_variance=variance,
    )


def operator_for_record(record):
    """Rebuild the sensing operator a record was produced with."""
    return make_gaussian_matrix(record.n_measurements, record.n_pixels,
                                record.operator_seed)


def save_record(record, path):
    doc = {
        "operator_seed": record.operator_seed,
        "n_measurements": record.n_measurements,
        "n_pixels": record.n_pixels,
        "image_shape": list(record.image_shape),
        "snr_db": record.snr_db,
        "noise_seed": record.noise_seed,
        "noise_variance": record.noise_variance,
        "y": record.y.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_record(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"measurement record is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise InvalidInputError("measurement record must hold a JSON object")
    try:
        return MeasurementRecord(
            y=np.asarray(doc["y"], dtype=float),
            operator_seed=int(doc["operator_seed"]),
            n_measurements=int(doc["n_measurements"]),
            n_pixels=int(doc["n_pixels"]),
            image_shape=tuple(doc["image_shape"]),
            snr_db=doc["snr_db"],
            noise_seed=doc["noise_seed"],
            noise_variance=float(doc["noise_variance"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"measurement record fields are invalid: {exc}")
