"""Convolutional Gaussian scale-mixture image prior.

The model assigns an unnormalized log density to a grayscale image by
correlating it with a small bank of filters (periodic boundary) and
scoring every response value under a zero-mean Gaussian mixture whose
component variances are a fixed base variance divided by a grid of
positive scales.  The unnormalized log density is the plain sum of
those per-filter, per-position mixture log densities.

Trainable parameters are the filter taps and, through a softmax
reparameterization, the per-filter mixture weights.  The base variance
and the scale grid stay fixed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import (
    InvalidInputError,
    MalformedModelError,
    ModelVersionError,
)

FORMAT_VERSION = 1

_LOG_2PI = math.log(2.0 * math.pi)


def _make_footprints():
    plus5 = np.zeros((3, 3), dtype=bool)
    plus5[1, :] = True
    plus5[:, 1] = True
    square3 = np.ones((3, 3), dtype=bool)
    square5 = np.ones((5, 5), dtype=bool)
    return {"plus5": plus5, "square3": square3, "square5": square5}


_FOOTPRINT_MASKS = _make_footprints()


def footprint_mask(name):
    """Boolean tap mask of the named footprint.

    plus5 is a 3x3 cross (5 taps), square3 a full 3x3 window and
    square5 a full 5x5 window.
    """
    try:
        return _FOOTPRINT_MASKS[name].copy()
    except KeyError:
        raise InvalidInputError(f"unknown footprint {name!r}") from None


def footprint_offsets(name):
    """Row/column offsets of the footprint taps relative to the center."""
    mask = footprint_mask(name)
    c = mask.shape[0] // 2
    rows, cols = np.nonzero(mask)
    return np.stack([rows - c, cols - c], axis=1)


@dataclass(frozen=True)
class FilterBank:
    """A bank of 2-D filters sharing one footprint.

    Parameters
    ----------
    taps : ndarray, shape (num_filters, k, k)
        Tap values.  Entries outside the footprint mask must be zero.
    footprint : str
        One of ``plus5``, ``square3``, ``square5``.
    """

    taps: np.ndarray
    footprint: str

    def __post_init__(self):
        mask = footprint_mask(self.footprint)
        taps = np.array(self.taps, dtype=float)
        if taps.ndim != 3:
            raise InvalidInputError("taps must have shape (num_filters, k, k)")
        if taps.shape[1:] != mask.shape:
            raise InvalidInputError(
                f"kernel shape {taps.shape[1:]} does not match footprint "
                f"{self.footprint!r} ({mask.shape})"
            )
        if not np.all(np.isfinite(taps)):
            raise InvalidInputError("taps must be finite")
        if taps.size and np.any(taps[:, ~mask] != 0.0):
            raise InvalidInputError("taps outside the footprint must be zero")
        taps.flags.writeable = False
        object.__setattr__(self, "taps", taps)

    @classmethod
    def random(cls, footprint, num_filters, rng, tap_scale=0.1, zero_mean=True):
        """Draw a bank of small random filters.

        With ``zero_mean`` the taps of each filter are re-centered so
        they sum to zero, which leaves constant images unconstrained.
        """
        mask = footprint_mask(footprint)
        taps = np.zeros((num_filters, *mask.shape))
        values = rng.normal(0.0, tap_scale, size=(num_filters, int(mask.sum())))
        if zero_mean:
            values -= values.mean(axis=1, keepdims=True)
        taps[:, mask] = values
        return cls(taps, footprint)

    @property
    def num_filters(self):
        return self.taps.shape[0]

    @property
    def kernel_size(self):
        return self.taps.shape[1]

    @property
    def taps_per_filter(self):
        return int(footprint_mask(self.footprint).sum())


@dataclass(frozen=True)
class ScaleGrid:
    """Fixed grid of positive scales dividing the base variance.

    Component ``n`` of every mixture has variance
    ``base_variance / scales[n]``.  Scales must be strictly ascending,
    so component variances are strictly descending.
    """

    scales: np.ndarray
    base_variance: float = 1.0

    def __post_init__(self):
        scales = np.array(self.scales, dtype=float)
        if scales.ndim != 1 or scales.size == 0:
            raise InvalidInputError("scales must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise InvalidInputError("scales must be finite and positive")
        if np.any(np.diff(scales) <= 0):
            raise InvalidInputError("scales must be strictly ascending")
        if not np.isfinite(self.base_variance) or self.base_variance <= 0:
            raise InvalidInputError("base variance must be finite and positive")
        scales.flags.writeable = False
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "base_variance", float(self.base_variance))

    @property
    def num_scales(self):
        return self.scales.size

    @property
    def component_variances(self):
        return self.base_variance / self.scales


@dataclass(frozen=True)
class MixtureWeights:
    """Per-filter mixture weights, one simplex row per filter."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2:
            raise InvalidInputError("weights must have shape (num_filters, num_scales)")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InvalidInputError("weights must be finite and non-negative")
        if w.shape[0] and np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-12):
            raise InvalidInputError("each weight row must sum to one")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class PriorModel:
    """Immutable bundle of filter bank, scale grid and mixture weights."""

    filter_bank: FilterBank
    scale_grid: ScaleGrid
    mixture_weights: MixtureWeights
    preset_name: str = "custom"

    def __post_init__(self):
        m = self.filter_bank.num_filters
        if self.mixture_weights.weights.shape[0] != m:
            raise InvalidInputError("one weight row per filter is required")
        if self.mixture_weights.weights.shape[1] != self.scale_grid.num_scales:
            raise InvalidInputError("one weight column per scale is required")

    @property
    def num_filters(self):
        return self.filter_bank.num_filters


# ---------------------------------------------------------------------------
# responses and activation


def _check_image(image):
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.size == 0:
        raise InvalidInputError("image must be a non-empty 2-D array")
    return image


def _correlate_periodic(image, taps, mask):
    c = taps.shape[0] // 2
    out = np.zeros_like(image)
    for a, b in zip(*np.nonzero(mask)):
        out += taps[a, b] * np.roll(image, shift=(-(a - c), -(b - c)), axis=(0, 1))
    return out


def filter_response(model, image, filter_index):
    """Periodic 2-D correlation of ``image`` with one filter.

    The response map has the same shape as the image; borders wrap
    around (circular boundary).
    """
    image = _check_image(image)
    bank = model.filter_bank
    if not 0 <= filter_index < bank.num_filters:
        raise InvalidInputError(
            f"filter index {filter_index} out of range [0, {bank.num_filters})"
        )
    mask = footprint_mask(bank.footprint)
    return _correlate_periodic(image, bank.taps[filter_index], mask)


def filter_responses(model, image):
    """All filter responses stacked, shape (num_filters, H, W)."""
    image = _check_image(image)
    bank = model.filter_bank
    mask = footprint_mask(bank.footprint)
    out = np.empty((bank.num_filters, *image.shape))
    for m in range(bank.num_filters):
        out[m] = _correlate_periodic(image, bank.taps[m], mask)
    return out


def _component_log_densities(t, weights, grid):
    """log(pi_n) + log N(t; 0, v_n) stacked along a trailing axis."""
    t = np.asarray(t, dtype=float)
    variances = grid.component_variances
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    log_norm = -0.5 * (_LOG_2PI + np.log(variances))
    return logw + log_norm - t[..., None] ** 2 / (2.0 * variances)


def gmm_log_activation(t, weights, grid):
    """Log density of the zero-mean Gaussian scale mixture at ``t``.

    Evaluated in log space, so very large arguments or very narrow
    components do not overflow.  Accepts scalars or arrays.
    """
    weights = np.asarray(weights, dtype=float)
    comp = _component_log_densities(t, weights, grid)
    out = logsumexp(comp, axis=-1)
    if np.isscalar(t) or np.ndim(t) == 0:
        return float(out)
    return out


def scale_responsibilities(t, weights, grid):
    """Posterior probability of each mixture component given a response.

    Returns an array with one trailing axis over scales; rows sum to
    one.
    """
    weights = np.asarray(weights, dtype=float)
    comp = _component_log_densities(t, weights, grid)
    return softmax(comp, axis=-1)


def log_prior_exponent(model, image):
    """Unnormalized log prior: mixture log densities summed over all
    filters and all spatial positions."""
    responses = filter_responses(model, image)
    if responses.shape[0] == 0:
        return 0.0
    comp = _component_log_densities(
        responses, model.mixture_weights.weights[:, None, None, :], model.scale_grid
    )
    return float(logsumexp(comp, axis=-1).sum())


def exponent_gradients(model, image):
    """Gradient of the unnormalized log prior.

    Returns
    -------
    tap_grad : ndarray, shape (num_filters, k, k)
        Gradient with respect to the filter taps; entries outside the
        footprint are zero.
    weight_grad : ndarray, shape (num_filters, num_scales)
        Gradient with respect to the unconstrained softmax weight
        parameters, evaluated at the representative point log(pi).
        Each row sums to zero.
    """
    image = _check_image(image)
    bank = model.filter_bank
    grid = model.scale_grid
    weights = model.mixture_weights.weights
    mask = footprint_mask(bank.footprint)
    responses = filter_responses(model, image)

    rho = scale_responsibilities(responses, weights[:, None, None, :], grid)
    # d/dt log sum_n pi_n N(t;0,v_n) = -t * sum_n rho_n / v_n
    inv_var = grid.scales / grid.base_variance
    phi_prime = -responses * (rho * inv_var).sum(axis=-1)

    c = bank.kernel_size // 2
    tap_grad = np.zeros_like(bank.taps)
    for a, b in zip(*np.nonzero(mask)):
        shifted = np.roll(image, shift=(-(a - c), -(b - c)), axis=(0, 1))
        tap_grad[:, a, b] = (phi_prime * shifted).sum(axis=(1, 2))

    n_positions = image.size
    weight_grad = rho.sum(axis=(1, 2)) - n_positions * weights
    return tap_grad, weight_grad


def unconstrained_parameters(model):
    """Flat vector of trainable parameters in a canonical gauge.

    Concatenates the footprint taps of every filter with the centered
    log weights of every row.  Used for update and stopping norms.
    """
    mask = footprint_mask(model.filter_bank.footprint)
    taps = model.filter_bank.taps[:, mask].ravel()
    w = np.clip(model.mixture_weights.weights, 1e-300, None)
    logw = np.log(w)
    logw = logw - logw.mean(axis=1, keepdims=True)
    return np.concatenate([taps, logw.ravel()])


def updated_model(model, tap_delta, weight_delta):
    """Apply additive steps to taps and unconstrained weights.

    Taps are re-centered to zero mean over the footprint after the
    step; weights move in softmax space and land back on the simplex.
    """
    bank = model.filter_bank
    mask = footprint_mask(bank.footprint)
    tap_delta = np.asarray(tap_delta, dtype=float)
    weight_delta = np.asarray(weight_delta, dtype=float)
    if tap_delta.shape != bank.taps.shape:
        raise InvalidInputError("tap step has wrong shape")
    if weight_delta.shape != model.mixture_weights.weights.shape:
        raise InvalidInputError("weight step has wrong shape")
    taps = bank.taps + tap_delta * mask
    if taps.size:
        means = taps[:, mask].mean(axis=1)
        taps = taps.copy()
        taps[:, mask] -= means[:, None]
    w = np.clip(model.mixture_weights.weights, 1e-300, None)
    logw = np.log(w) + weight_delta
    new_weights = softmax(logw, axis=1)
    return PriorModel(
        FilterBank(taps, bank.footprint),
        model.scale_grid,
        MixtureWeights(new_weights),
        preset_name=model.preset_name,
    )


# ---------------------------------------------------------------------------
# presets

_SCALE_SETS = {
    "delta1": np.exp(np.array([-7.0, -3.0, 0.0, 3.0, 7.0])),
    "delta2": np.exp(np.array([-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0])),
}

PRESETS = {
    "bcnn1": ("plus5", 4, "delta1"),
    "bcnn2": ("square3", 4, "delta1"),
    "bcnn3": ("square3", 8, "delta1"),
    "bcnn4": ("square3", 8, "delta2"),
    "bcnn5": ("square5", 24, "delta2"),
}


def preset_model(name, seed=0, base_variance=1.0):
    """Build a named preset with seeded random zero-mean filters and
    uniform mixture weights."""
    try:
        footprint, num_filters, scale_set = PRESETS[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown preset {name!r}; choose one of {sorted(PRESETS)}"
        ) from None
    rng = np.random.default_rng(seed)
    bank = FilterBank.random(footprint, num_filters, rng, tap_scale=0.1, zero_mean=True)
    grid = ScaleGrid(_SCALE_SETS[scale_set], base_variance=base_variance)
    weights = MixtureWeights(
        np.full((num_filters, grid.num_scales), 1.0 / grid.num_scales)
    )
    return PriorModel(bank, grid, weights, preset_name=name)


def trainable_parameter_count(model):
    """Number of trainable parameters: footprint taps plus one mixture
    weight per filter and scale."""
    m = model.filter_bank.num_filters
    return m * model.filter_bank.taps_per_filter + m * model.scale_grid.num_scales


# ---------------------------------------------------------------------------
# serialization

_REQUIRED_FIELDS = (
    "format_version",
    "preset_name",
    "footprint",
    "num_filters",
    "scales",
    "base_variance",
    "weights",
    "taps",
)


def save_model(model, path):
    """Write the model as human-readable structured text (JSON).

    Floating-point values are serialized with full round-trip
    precision.
    """
    doc = {
        "format_version": FORMAT_VERSION,
        "preset_name": model.preset_name,
        "footprint": model.filter_bank.footprint,
        "num_filters": model.filter_bank.num_filters,
        "scales": model.scale_grid.scales.tolist(),
        "base_variance": model.scale_grid.base_variance,
        "weights": model.mixture_weights.weights.tolist(),
        "taps": model.filter_bank.taps.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path):
    """Read a model written by :func:`save_model`.

    Raises
    ------
    ModelVersionError
        If the file declares a format version other than the one this
        code writes.
    MalformedModelError
        If the file is not valid JSON or violates the documented
        structure.
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedModelError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedModelError("model file must hold a JSON object")
    if "format_version" not in doc:
        raise MalformedModelError("model file lacks a format_version field")
    if doc["format_version"] != FORMAT_VERSION:
        raise ModelVersionError(
            f"unsupported model format version {doc['format_version']!r}; "
            f"this build reads version {FORMAT_VERSION}"
        )
    missing = [f for f in _REQUIRED_FIELDS if f not in doc]
    if missing:
        raise MalformedModelError(f"model file lacks fields: {', '.join(missing)}")
    try:
        bank = FilterBank(np.asarray(doc["taps"], dtype=float), doc["footprint"])
        grid = ScaleGrid(
            np.asarray(doc["scales"], dtype=float), base_variance=doc["base_variance"]
        )
        weights = MixtureWeights(np.asarray(doc["weights"], dtype=float))
        model = PriorModel(bank, grid, weights, preset_name=str(doc["preset_name"]))
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise MalformedModelError(f"model file fields are inconsistent: {exc}") from exc
    if model.filter_bank.num_filters != doc["num_filters"]:
        raise MalformedModelError("num_filters does not match the taps array")
    return model
