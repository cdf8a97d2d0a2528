"""Image quality metrics, histogram comparisons and reference baselines.

PSNR and SSIM score restored images against ground truth.  Response
histograms and the KL divergence compare the empirical statistics a
model produces against data.  ``activation_spectrum`` probes the
frequency content of pointwise activations, and ``lasso_ista`` is a
sparse-recovery baseline to measure the sampler against.
"""

from dataclasses import dataclass, field
import io
import math

import numpy as np

from .errors import InvalidInputError, SolverError
from . import prior

_SSIM_WINDOW = 8
_PSNR_CAP_DB = 100.0
_KLD_FLOOR = 1e-12


def _as_image_pair(reference, test):
    a = np.asarray(reference, dtype=float)
    b = np.asarray(test, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidInputError("images must be 2-D arrays")
    if a.shape != b.shape:
        raise InvalidInputError(
            f"image shapes differ: {a.shape} vs {b.shape}"
        )
    return a, b


def _default_peak(reference, test):
    for arr in (reference, test):
        if isinstance(arr, np.ndarray) and arr.dtype == np.uint8:
            return 255.0
    return 1.0


def psnr(reference, test, peak=None):
    """Peak signal-to-noise ratio in decibels, capped at 100 dB.

    ``peak`` defaults to 255 for uint8 inputs and 1.0 otherwise.
    """
    if peak is None:
        peak = _default_peak(reference, test)
    a, b = _as_image_pair(reference, test)
    if peak <= 0:
        raise InvalidInputError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return _PSNR_CAP_DB
    value = 10.0 * math.log10(peak ** 2 / mse)
    return min(value, _PSNR_CAP_DB)


def ssim(reference, test, peak=1.0):
    """Mean structural similarity over all 8x8 sliding windows.

    Uniform windows, biased (population) moments, stability constants
    (0.01*peak)^2 and (0.03*peak)^2.
    """
    a, b = _as_image_pair(reference, test)
    if min(a.shape) < _SSIM_WINDOW:
        raise InvalidInputError(
            f"images must be at least {_SSIM_WINDOW} pixels on each side"
        )
    if peak <= 0:
        raise InvalidInputError("peak must be positive")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    win = (_SSIM_WINDOW, _SSIM_WINDOW)
    wa = np.lib.stride_tricks.sliding_window_view(a, win)
    wb = np.lib.stride_tricks.sliding_window_view(b, win)
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa ** 2).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def kld(p, q):
    """Kullback-Leibler divergence sum p*log(p/q) in nats.

    Accepts two mass vectors or two ``Histogram`` objects over
    identical edges.  Zero entries of ``q`` are floored at 1e-12; zero
    entries of ``p`` contribute nothing.
    """
    if isinstance(p, Histogram) or isinstance(q, Histogram):
        if not (isinstance(p, Histogram) and isinstance(q, Histogram)):
            raise InvalidInputError("mixing a histogram with a raw vector")
        if p.edges.shape != q.edges.shape or np.any(p.edges != q.edges):
            raise InvalidInputError("histograms use different bin edges")
        p, q = p.masses, q.masses
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise InvalidInputError("p and q must be 1-D with equal length")
    if np.any(p < 0) or np.any(q < 0):
        raise InvalidInputError("probabilities must be nonnegative")
    for name, arr in (("p", p), ("q", q)):
        if abs(arr.sum() - 1.0) > 1e-6:
            raise InvalidInputError(f"{name} must sum to one")
    q = np.maximum(q, _KLD_FLOOR)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


@dataclass(frozen=True)
class Histogram:
    """Normalized histogram: ``edges`` has one more entry than ``masses``."""

    edges: np.ndarray
    masses: np.ndarray

    def to_text(self):
        """Two columns per line: bin center, mass."""
        centers = 0.5 * (self.edges[:-1] + self.edges[1:])
        lines = [
            f"{float(c)!r} {float(m)!r}" for c, m in zip(centers, self.masses)
        ]
        return "\n".join(lines) + "\n"


def spectrum_to_text(magnitudes):
    """Two columns per line: frequency bin index, magnitude."""
    lines = [
        f"{k} {float(m)!r}" for k, m in enumerate(np.asarray(magnitudes))
    ]
    return "\n".join(lines) + "\n"


def response_histogram(model, images, bins=64, edges=None):
    """Histogram of filter responses pooled over filters and images.

    Without explicit ``edges`` the range is symmetric and covers the
    0.999 quantile of the absolute responses.  Out-of-range responses
    are counted in the end bins, so masses always sum to one.
    """
    if model.num_filters == 0:
        raise InvalidInputError("model has no filters")
    images = np.asarray(images, dtype=float)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3:
        raise InvalidInputError("images must be one 2-D array or a 3-D batch")
    responses = np.concatenate(
        [prior.filter_responses(model, im).ravel() for im in images]
    )
    if edges is None:
        if bins < 2:
            raise InvalidInputError("need at least two bins")
        # order-statistic quantile: invariant under duplicating the batch
        half = float(np.quantile(np.abs(responses), 0.999,
                                 method="inverted_cdf"))
        if half <= 0:
            half = 1.0
        edges = np.linspace(-half, half, bins + 1)
    else:
        edges = np.asarray(edges, dtype=float)
        if edges.ndim != 1 or len(edges) < 3 or np.any(np.diff(edges) <= 0):
            raise InvalidInputError("edges must be increasing with >= 3 entries")
    idx = np.searchsorted(edges, responses, side="right") - 1
    idx = np.clip(idx, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1).astype(float)
    return Histogram(edges=edges, masses=counts / counts.sum())


_MIN_SPECTRUM_SAMPLES = 64


def activation_spectrum(kind, samples=1024, half_range=10.0, model=None,
                        filter_index=0):
    """Magnitudes of the real FFT of an activation sampled on a grid.

    ``kind`` is "relu", "arctan", "gmm" (the model's log activation for
    one filter) or any callable.  The grid is ``samples`` points spread
    evenly over [-half_range, half_range] including both endpoints.
    """
    if samples < _MIN_SPECTRUM_SAMPLES:
        raise InvalidInputError(
            f"need at least {_MIN_SPECTRUM_SAMPLES} samples"
        )
    if half_range <= 0:
        raise InvalidInputError("half_range must be positive")
    t = np.linspace(-half_range, half_range, samples)
    if callable(kind):
        values = np.asarray(kind(t), dtype=float)
    elif kind == "relu":
        values = np.maximum(t, 0.0)
    elif kind == "arctan":
        values = np.arctan(t)
    elif kind == "gmm":
        if model is None:
            raise InvalidInputError("kind 'gmm' requires a model")
        if not 0 <= filter_index < model.num_filters:
            raise InvalidInputError(
                f"filter index {filter_index} out of range"
            )
        values = prior.gmm_log_activation(
            t, model.mixture_weights.weights[filter_index], model.scale_grid
        )
    else:
        raise InvalidInputError(f"unknown activation kind: {kind!r}")
    if values.shape != t.shape:
        raise InvalidInputError("activation must map the grid pointwise")
    return np.abs(np.fft.rfft(values)) / samples


def _spectral_norm_sq(A, power_iters):
    """Largest squared singular value by power iteration on A^T A."""
    n = A.shape[1]
    v = np.full(n, 1.0 / math.sqrt(n))
    estimate = 0.0
    for _ in range(power_iters):
        w = A.T @ (A @ v)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        new = float(v @ w)
        v = w / norm
        if abs(new - estimate) <= 1e-9 * max(new, 1.0):
            return new
        estimate = new
    raise SolverError(
        f"power iteration did not converge in {power_iters} steps"
    )


def lasso_ista(A, y, lam, iterations, power_iters=10000):
    """Iterative soft-thresholding for 0.5*||Ax - y||^2 + lam*||x||_1.

    The step size is the reciprocal of the largest squared singular
    value, estimated by power iteration and inflated slightly so the
    objective never increases.  The iteration budget must absorb the
    near-degenerate top eigengap of wide random matrices, where a few
    thousand steps are normal.  Returns the final iterate and the
    objective after the initial point and after every step.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    if A.ndim != 2:
        raise InvalidInputError("A must be 2-D")
    if y.shape != (A.shape[0],):
        raise InvalidInputError("y length must match the rows of A")
    if lam < 0:
        raise InvalidInputError("penalty must be nonnegative")
    if iterations < 1:
        raise InvalidInputError("need at least one iteration")
    if power_iters < 1:
        raise InvalidInputError("need at least one power iteration")
    lipschitz = _spectral_norm_sq(A, power_iters) * (1.0 + 1e-3)
    if lipschitz == 0.0:
        raise SolverError("A has zero spectral norm")
    step = 1.0 / lipschitz
    x = np.zeros(A.shape[1])
    objectives = np.empty(iterations + 1)

    def objective(v):
        r = A @ v - y
        return 0.5 * float(r @ r) + lam * float(np.abs(v).sum())

    objectives[0] = objective(x)
    threshold = lam * step
    for k in range(iterations):
        grad = A.T @ (A @ x - y)
        z = x - step * grad
        x = np.sign(z) * np.maximum(np.abs(z) - threshold, 0.0)
        objectives[k + 1] = objective(x)
    return x, objectives


@dataclass(frozen=True)
class ReportRow:
    """One restoration outcome: metrics plus the settings that made it."""

    image_id: str
    method: str
    measurement_ratio: float
    snr_db: float | None
    psnr_db: float
    ssim: float
    wall_time_s: float
    seed: int


_REPORT_COLUMNS = (
    "image_id,method,measurement_ratio,snr_db,psnr_db,ssim,wall_time_s,seed"
)


@dataclass(frozen=True)
class Report:
    rows: list
    aggregates: dict = field(default_factory=dict)

    def to_csv(self):
        out = io.StringIO()
        out.write(_REPORT_COLUMNS + "\n")
        for r in self.rows:
            snr = "" if r.snr_db is None else repr(float(r.snr_db))
            out.write(
                f"{r.image_id},{r.method},{float(r.measurement_ratio)!r},"
                f"{snr},{float(r.psnr_db)!r},{float(r.ssim)!r},"
                f"{float(r.wall_time_s)!r},{int(r.seed)}\n"
            )
        return out.getvalue()


def build_report(rows):
    """Group rows by method and attach per-method mean metrics."""
    rows = list(rows)
    aggregates = {}
    for row in rows:
        bucket = aggregates.setdefault(
            row.method,
            {"count": 0, "mean_psnr_db": 0.0, "mean_ssim": 0.0,
             "mean_wall_time_s": 0.0},
        )
        bucket["count"] += 1
        bucket["mean_psnr_db"] += row.psnr_db
        bucket["mean_ssim"] += row.ssim
        bucket["mean_wall_time_s"] += row.wall_time_s
    for bucket in aggregates.values():
        n = bucket["count"]
        for key in ("mean_psnr_db", "mean_ssim", "mean_wall_time_s"):
            bucket[key] /= n
    return Report(rows=rows, aggregates=aggregates)
