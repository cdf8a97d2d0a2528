"""Patch datasets and contrastive-divergence training of the prior.

The gradient of the unnormalized log prior is averaged over a data
batch; negative samples come from short Gibbs chains started at the
batch (or from persistent chains), and the parameter step is the
difference of the two averages.  Filters are re-centered and mixture
weights renormalized after every step, so iterates stay in the
canonical parameterization and the partition function's shift
invariance cannot leak into the stopping norm.
"""

from dataclasses import dataclass
import json
import math
import time
from pathlib import Path

import numpy as np

from . import evaluation, prior, sampler
from .errors import DataFileError, InvalidInputError, NumericalError

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PatchSource:
    """Provenance of one patch: image id and top-left corner."""

    image_id: str
    row: int
    col: int


@dataclass(frozen=True)
class PatchDataset:
    """Square training patches in [0, 1] with their extraction record."""

    patches: np.ndarray
    manifest: tuple
    patch_size: int
    stride: int
    seed: int
    skipped: tuple = ()

    def __post_init__(self):
        arr = np.array(self.patches, dtype=float)
        if arr.ndim != 3:
            raise InvalidInputError("patches must form a (count, P, P) array")
        p = int(self.patch_size)
        if arr.shape[0] and arr.shape[1:] != (p, p):
            raise InvalidInputError(
                f"patch array shape {arr.shape[1:]} does not match "
                f"patch_size {p}"
            )
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise InvalidInputError("patch values must lie in [0, 1]")
        if len(self.manifest) != arr.shape[0]:
            raise InvalidInputError("one manifest entry per patch is required")
        arr.flags.writeable = False
        object.__setattr__(self, "patches", arr)
        object.__setattr__(self, "manifest", tuple(self.manifest))
        object.__setattr__(self, "skipped", tuple(self.skipped))

    def __len__(self):
        return self.patches.shape[0]


def _named_images(images):
    out = []
    for i, item in enumerate(images):
        if isinstance(item, tuple) and len(item) == 2:
            name, arr = item
        else:
            name, arr = f"image{i:04d}", item
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise InvalidInputError(f"{name}: images must be 2-D")
        if np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(float) / 255.0
        else:
            arr = arr.astype(float)
            if arr.size and (arr.min() < -1e-9 or arr.max() > 1 + 1e-9):
                raise InvalidInputError(
                    f"{name}: float images must lie in [0, 1]"
                )
            arr = np.clip(arr, 0.0, 1.0)
        out.append((str(name), arr))
    return out


def extract_patches(images, patch_size=20, stride=10, seed=0,
                    max_patches=None):
    """Cut every image into square patches on a uniform stride grid.

    Images may be arrays or (name, array) pairs.  Integer images are
    scaled by 1/255; float images must already lie in [0, 1].  Images
    smaller than the patch are skipped and recorded.  ``max_patches``
    keeps a seeded uniform subsample, preserving extraction order.
    """
    if patch_size < 1 or stride < 1:
        raise InvalidInputError("patch_size and stride must be positive")
    named = _named_images(images)
    if not named:
        raise InvalidInputError("no images given")
    patches = []
    manifest = []
    skipped = []
    for name, arr in named:
        h, w = arr.shape
        if h < patch_size or w < patch_size:
            skipped.append(f"{name}: {h}x{w} smaller than patch {patch_size}")
            continue
        for r in range(0, h - patch_size + 1, stride):
            for c in range(0, w - patch_size + 1, stride):
                patches.append(arr[r : r + patch_size, c : c + patch_size])
                manifest.append(PatchSource(name, r, c))
    if max_patches is not None and max_patches < len(patches):
        if max_patches < 1:
            raise InvalidInputError("max_patches must be at least 1")
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(patches), size=max_patches,
                                  replace=False))
        patches = [patches[k] for k in keep]
        manifest = [manifest[k] for k in keep]
    stacked = (
        np.stack(patches)
        if patches
        else np.zeros((0, patch_size, patch_size))
    )
    return PatchDataset(
        patches=stacked,
        manifest=tuple(manifest),
        patch_size=patch_size,
        stride=stride,
        seed=seed,
        skipped=tuple(skipped),
    )


def save_dataset(dataset, directory):
    """Write patches.npy plus a JSON manifest into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "patches.npy", dataset.patches)
    doc = {
        "format_version": DATASET_FORMAT_VERSION,
        "patch_size": dataset.patch_size,
        "stride": dataset.stride,
        "seed": dataset.seed,
        "skipped": list(dataset.skipped),
        "sources": [[s.image_id, s.row, s.col] for s in dataset.manifest],
    }
    (directory / "manifest.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n"
    )


def load_dataset(directory):
    """Read a dataset written by ``save_dataset``."""
    directory = Path(directory)
    patches_path = directory / "patches.npy"
    manifest_path = directory / "manifest.json"
    if not patches_path.is_file() or not manifest_path.is_file():
        raise DataFileError(f"no dataset found in {directory}")
    try:
        doc = json.loads(manifest_path.read_text())
        patches = np.load(patches_path)
        if doc["format_version"] != DATASET_FORMAT_VERSION:
            raise DataFileError(
                f"unsupported dataset format {doc['format_version']!r}"
            )
        manifest = tuple(
            PatchSource(str(i), int(r), int(c)) for i, r, c in doc["sources"]
        )
        return PatchDataset(
            patches=patches,
            manifest=manifest,
            patch_size=int(doc["patch_size"]),
            stride=int(doc["stride"]),
            seed=int(doc["seed"]),
            skipped=tuple(doc["skipped"]),
        )
    except DataFileError:
        raise
    except (KeyError, TypeError, ValueError, InvalidInputError) as exc:
        raise DataFileError(f"malformed dataset in {directory}: {exc}") from exc


# ---------------------------------------------------------------------------
# contrastive divergence


@dataclass(frozen=True)
class TrainingConfig:
    """Knobs of the CD loop.

    ``learning_rate`` 0 is allowed as a documented dry run that leaves
    the model untouched; effective training needs a positive rate.
    """

    learning_rate: float = 0.01
    batch_size: int = 64
    cd_steps: int = 1
    stop_threshold: float = 1e-5
    max_epochs: int = 30
    seed: int = 0
    holdout_fraction: float = 0.1
    model_selection: bool = True
    persistent: bool = False
    histogram_bins: int = 64
    solver: sampler.SolverOptions = None

    def __post_init__(self):
        if not 0.0 <= self.learning_rate <= 1.0:
            raise InvalidInputError("learning_rate must lie in [0, 1]")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be at least 1")
        if self.cd_steps < 1:
            raise InvalidInputError("cd_steps must be at least 1")
        if self.stop_threshold <= 0:
            raise InvalidInputError("stop_threshold must be positive")
        if self.max_epochs < 0:
            raise InvalidInputError("max_epochs must be nonnegative")
        if not 0.0 <= self.holdout_fraction <= 0.5:
            raise InvalidInputError("holdout_fraction must lie in [0, 0.5]")
        if self.histogram_bins < 2:
            raise InvalidInputError("histogram_bins must be at least 2")


@dataclass(frozen=True)
class CdUpdateResult:
    """Norms of one CD step plus batch-mean exponents for the trace."""

    parameter_change: float
    tap_change: float
    weight_change: float
    mean_data_exponent: float
    mean_model_exponent: float


def _as_batch(data_batch):
    arr = np.array(data_batch, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise InvalidInputError("batch must hold at least one 2-D image")
    return arr


def _mean_gradients(model, batch):
    tap_sum = np.zeros_like(model.filter_bank.taps)
    weight_sum = np.zeros_like(model.mixture_weights.weights)
    exponent_sum = 0.0
    for image in batch:
        tg, wg = prior.exponent_gradients(model, image)
        tap_sum += tg
        weight_sum += wg
        exponent_sum += prior.log_prior_exponent(model, image)
    n = batch.shape[0]
    return tap_sum / n, weight_sum / n, exponent_sum / n


def cd_update(model, data_batch, config, rng=None, negatives=None):
    """One contrastive-divergence step.

    Negative samples default to ``cd_steps`` Gibbs sweeps started at
    the data batch; pass ``negatives`` to reuse persistent chains.
    Returns the stepped model and the step's norms.  A zero learning
    rate or a zero gradient difference returns the input model object
    untouched, bit for bit.
    """
    batch = _as_batch(data_batch)
    if config.learning_rate == 0.0:
        _, _, data_exp = _mean_gradients(model, batch)
        return model, CdUpdateResult(0.0, 0.0, 0.0, data_exp, math.nan)
    if negatives is None:
        negatives = sampler.run_prior_chain(
            model, batch, config.cd_steps, options=config.solver, rng=rng
        )
    negatives = _as_batch(negatives)
    data_tap, data_w, data_exp = _mean_gradients(model, batch)
    model_tap, model_w, model_exp = _mean_gradients(model, negatives)
    tap_step = config.learning_rate * (data_tap - model_tap)
    weight_step = config.learning_rate * (data_w - model_w)
    if not (np.all(np.isfinite(tap_step)) and np.all(np.isfinite(weight_step))):
        raise NumericalError("CD step is not finite")
    if not tap_step.any() and not weight_step.any():
        return model, CdUpdateResult(0.0, 0.0, 0.0, data_exp, model_exp)
    new_model = prior.updated_model(model, tap_step, weight_step)
    before = prior.unconstrained_parameters(model)
    after = prior.unconstrained_parameters(new_model)
    n_taps = model.num_filters * model.filter_bank.taps_per_filter
    diff = after - before
    return new_model, CdUpdateResult(
        parameter_change=float(np.linalg.norm(diff)),
        tap_change=float(np.linalg.norm(diff[:n_taps])),
        weight_change=float(np.linalg.norm(diff[n_taps:])),
        mean_data_exponent=data_exp,
        mean_model_exponent=model_exp,
    )


def sample_divergence(model, images, sweeps, options=None, rng=None, bins=64):
    """KLD between the response histogram of ``images`` and that of
    prior-chain samples started from them.

    Shared bin edges come from the data side, so the bound is zero
    only when the chains preserve the empirical response law.
    """
    images = _as_batch(images)
    data_hist = evaluation.response_histogram(model, images, bins=bins)
    drawn = sampler.run_prior_chain(model, images, sweeps, options=options,
                                    rng=rng)
    model_hist = evaluation.response_histogram(model, drawn,
                                               edges=data_hist.edges)
    return evaluation.kld(data_hist.masses, model_hist.masses)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    parameter_change: float
    mean_data_exponent: float
    mean_model_exponent: float
    holdout_kld: float
    wall_time_s: float


_TRACE_COLUMNS = (
    "epoch,parameter_change,mean_data_exponent,mean_model_exponent,"
    "holdout_kld,wall_time_s"
)


@dataclass(frozen=True)
class TrainingTrace:
    records: tuple

    def to_csv(self):
        lines = [_TRACE_COLUMNS]
        for r in self.records:
            hold = "" if r.holdout_kld is None else repr(float(r.holdout_kld))
            lines.append(
                f"{r.epoch},{float(r.parameter_change)!r},"
                f"{float(r.mean_data_exponent)!r},"
                f"{float(r.mean_model_exponent)!r},{hold},"
                f"{float(r.wall_time_s)!r}"
            )
        return "\n".join(lines) + "\n"


def _write_trace(trace, trace_path):
    Path(trace_path).write_text(trace.to_csv())


def train(model, dataset, config, trace_path=None):
    """Run the CD training loop over a patch dataset.

    Epochs shuffle the training patches, apply ``cd_update`` per batch
    and stop early once the per-epoch parameter change drops below the
    threshold.  With model selection enabled, 10 percent of patches
    (by default) are held out and the epoch with the lowest holdout
    divergence supplies the returned model; otherwise the final model
    is returned.  The trace is written to ``trace_path``, also when an
    epoch raises.
    """
    if len(dataset) < 1:
        raise InvalidInputError("dataset must hold at least one patch")
    records = []
    if config.max_epochs == 0:
        trace = TrainingTrace(())
        if trace_path is not None:
            _write_trace(trace, trace_path)
        return model, trace
    seed_seq = np.random.SeedSequence(config.seed)
    split_rng, shuffle_rng, chain_rng, holdout_rng = (
        np.random.default_rng(child) for child in seed_seq.spawn(4)
    )
    n = len(dataset)
    n_hold = 0
    if config.model_selection:
        n_hold = min(int(round(config.holdout_fraction * n)), n - 1)
    perm = split_rng.permutation(n)
    holdout = dataset.patches[perm[:n_hold]]
    training = dataset.patches[perm[n_hold:]]
    best_score = math.inf
    best_model = model
    persistent_pool = None
    try:
        for epoch in range(config.max_epochs):
            started = time.perf_counter()
            theta_before = prior.unconstrained_parameters(model)
            order = shuffle_rng.permutation(training.shape[0])
            exp_data = 0.0
            exp_model = 0.0
            seen = 0
            for lo in range(0, order.size, config.batch_size):
                batch = training[order[lo : lo + config.batch_size]]
                negatives = None
                if config.persistent and config.learning_rate > 0.0:
                    if persistent_pool is None:
                        persistent_pool = batch.copy()
                    negatives = sampler.run_prior_chain(
                        model, persistent_pool, config.cd_steps,
                        options=config.solver, rng=chain_rng,
                    )
                    persistent_pool = negatives
                model, result = cd_update(
                    model, batch, config, rng=chain_rng, negatives=negatives
                )
                exp_data += result.mean_data_exponent * batch.shape[0]
                exp_model += result.mean_model_exponent * batch.shape[0]
                seen += batch.shape[0]
            change = float(np.linalg.norm(
                prior.unconstrained_parameters(model) - theta_before
            ))
            score = None
            if n_hold:
                score = sample_divergence(
                    model, holdout, config.cd_steps, options=config.solver,
                    rng=holdout_rng, bins=config.histogram_bins,
                )
                if score < best_score:
                    best_score = score
                    best_model = model
            records.append(EpochRecord(
                epoch=epoch,
                parameter_change=change,
                mean_data_exponent=exp_data / seen,
                mean_model_exponent=exp_model / seen,
                holdout_kld=score,
                wall_time_s=time.perf_counter() - started,
            ))
            if change < config.stop_threshold:
                break
    except BaseException:
        if trace_path is not None:
            _write_trace(TrainingTrace(tuple(records)), trace_path)
        raise
    trace = TrainingTrace(tuple(records))
    if trace_path is not None:
        _write_trace(trace, trace_path)
    return (best_model if n_hold else model), trace
