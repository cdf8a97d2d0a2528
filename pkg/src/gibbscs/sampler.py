"""Blocked Gibbs sampling for restoration under the scale-mixture prior.

The chain alternates three moves:

* resample the per-filter, per-position scale indices from their
  categorical conditional given the image,
* resample the image from the Gaussian conditional given the scale
  field and (optionally) linear measurements,
* resample the measurement noise precision from its Gamma conditional.

The Gaussian conditional is expressed through a stacked linear system:
every filter row (one per filter and position) contributes a zero-mean
pseudo-observation with variance base_variance/scale, every
measurement row contributes y with the noise variance, and a ridge
epsilon*I keeps the precision positive definite when zero-mean filters
leave the constant direction unconstrained.  Image draws use
perturb-and-solve: perturb the stacked targets with their own noise,
then solve the normal equations, which yields exact Gaussian samples.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.sparse.linalg import LinearOperator, cg

from . import prior
from .errors import (
    InvalidInputError,
    NotPositiveDefiniteError,
    SolverError,
)

DENSE_SOLVER_LIMIT = 4096

_RESIDUAL_FLOOR = 1e-12


@dataclass
class SolverOptions:
    """Options for solving the Gaussian conditional.

    method
        ``dense_cholesky``, ``conjugate_gradient`` or ``auto`` (dense
        up to 4096 unknowns, CG above).
    cg_tolerance
        Relative residual target for CG.
    cg_max_iters
        CG iteration cap; defaults to ten times the unknown count.
    ridge
        Epsilon added to the precision diagonal by the chain drivers.
    """

    method: str = "auto"
    cg_tolerance: float = 1e-8
    cg_max_iters: Optional[int] = None
    ridge: float = 1e-8


@dataclass(frozen=True)
class AuxiliaryField:
    """Per-filter, per-position scale indices (0-based)."""

    indices: np.ndarray
    num_scales: int

    def __post_init__(self):
        idx = np.array(self.indices)
        if idx.ndim != 3:
            raise InvalidInputError("scale indices must have shape (filters, H, W)")
        if not np.issubdtype(idx.dtype, np.integer):
            raise InvalidInputError("scale indices must be integers")
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_scales):
            raise InvalidInputError(
                f"scale indices must lie in [0, {self.num_scales})"
            )
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    @property
    def image_shape(self):
        return self.indices.shape[1:]


@dataclass
class GibbsChainState:
    """Snapshot of a chain: image, scale field, noise precision."""

    image: np.ndarray
    scales: AuxiliaryField
    noise_precision: float
    iteration: int
    rng: np.random.Generator

    def __post_init__(self):
        if not np.all(np.isfinite(self.image)):
            raise InvalidInputError("chain image must be finite")
        if not self.noise_precision > 0:
            raise InvalidInputError("noise precision must be positive")


@dataclass(frozen=True)
class IterationRecord:
    """One diagnostics row of a restoration chain."""

    iteration: int
    residual_sq: float
    exponent: float
    noise_precision: float


@dataclass(frozen=True)
class RestorationResult:
    """Restored image plus final chain state and diagnostics."""

    image: np.ndarray
    state: GibbsChainState
    diagnostics: list


def diagnostics_to_csv(records):
    """Render diagnostics rows as CSV with full float precision."""
    out = io.StringIO()
    out.write("iteration,residual_sq,exponent,noise_precision\n")
    for r in records:
        out.write(f"{r.iteration},{r.residual_sq!r},{r.exponent!r},{r.noise_precision!r}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# stacked filter operator


class PriorOperator:
    """Stacked periodic-correlation rows of every filter at one shape.

    Row m*H*W + p applies filter m at position p.  A dense copy is kept
    for small systems where sparse-matrix overhead dominates.
    """

    def __init__(self, model, shape):
        h, w = shape
        n = h * w
        bank = model.filter_bank
        offsets = prior.footprint_offsets(bank.footprint)
        mask = prior.footprint_mask(bank.footprint)
        c = bank.kernel_size // 2
        pos = np.arange(n)
        pi, pj = divmod(pos, w)
        rows = []
        cols = []
        vals = []
        for m in range(bank.num_filters):
            taps = bank.taps[m]
            for di, dj in offsets:
                col = ((pi + di) % h) * w + (pj + dj) % w
                rows.append(m * n + pos)
                cols.append(col)
                vals.append(np.full(n, taps[c + di, c + dj]))
        self.shape = shape
        self.num_filters = bank.num_filters
        self.n_rows = bank.num_filters * n
        if rows:
            self.matrix = scipy.sparse.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.n_rows, n),
            ).tocsr()
        else:
            self.matrix = scipy.sparse.csr_matrix((0, n))
        # Dense copy pays off only when the whole stacked matrix is tiny.
        self.dense = (
            self.matrix.toarray() if 0 < self.n_rows * n <= 65536 else None
        )

    def responses(self, image):
        flat = self.matrix @ np.asarray(image, dtype=float).ravel()
        return flat.reshape(self.num_filters, *self.shape)


# ---------------------------------------------------------------------------
# linear-Gaussian system


class LinearGaussianSystem:
    """Precision-form Gaussian in the image unknowns.

    P = sum of filter rows weighted by their inverse variances, plus
    A^T A / noise_variance, plus ridge*I.  The right-hand side b uses
    zero targets on filter rows and y on measurement rows.
    """

    def __init__(self, shape, prior_op, prior_inv_variances, A, y,
                 noise_variance, ridge):
        self.shape = shape
        self.prior_op = prior_op
        self.prior_inv_variances = prior_inv_variances
        self.A = A
        self.y = y
        self.noise_variance = noise_variance
        self.ridge = ridge
        self._dense = None
        self._cho = None
        self._ata = None

    @property
    def n_unknowns(self):
        return self.shape[0] * self.shape[1]

    def matvec(self, v):
        v = np.asarray(v, dtype=float).ravel()
        out = self.ridge * v
        if self.prior_op is not None and self.prior_op.n_rows:
            c = self.prior_op.matrix
            out = out + c.T @ (self.prior_inv_variances * (c @ v))
        if self.A is not None:
            out = out + self.A.T @ (self.A @ v) / self.noise_variance
        return out

    def _measurement_gram(self):
        if self._ata is None and self.A is not None:
            self._ata = self.A.T @ self.A
        return self._ata

    def set_measurement_gram(self, ata):
        """Install a precomputed A^T A (shared across chain sweeps)."""
        self._ata = ata

    def dense_precision(self):
        if self._dense is not None:
            return self._dense
        n = self.n_unknowns
        p = np.zeros((n, n))
        op = self.prior_op
        if op is not None and op.n_rows:
            w = self.prior_inv_variances
            if op.dense is not None:
                p += op.dense.T @ (w[:, None] * op.dense)
            else:
                weighted = scipy.sparse.diags(w) @ op.matrix
                part = (op.matrix.T @ weighted).tocoo()
                p[part.row, part.col] += part.data
        if self.A is not None:
            p += self._measurement_gram() / self.noise_variance
        p.flat[:: n + 1] += self.ridge
        self._dense = p
        return p

    def rhs(self):
        if self.A is None:
            return np.zeros(self.n_unknowns)
        return self.A.T @ self.y / self.noise_variance

    def perturbed_rhs(self, rng):
        """Right-hand side with every stacked row's target perturbed by
        its own noise; solving with it yields an exact Gaussian draw."""
        t = np.zeros(self.n_unknowns)
        op = self.prior_op
        if op is not None and op.n_rows:
            noise = rng.standard_normal(op.n_rows)
            t += op.matrix.T @ (np.sqrt(self.prior_inv_variances) * noise)
        if self.A is not None:
            noise = rng.standard_normal(self.A.shape[0])
            perturbed = self.y + np.sqrt(self.noise_variance) * noise
            t += self.A.T @ perturbed / self.noise_variance
        if self.ridge > 0:
            t += np.sqrt(self.ridge) * rng.standard_normal(self.n_unknowns)
        return t

    def _cholesky(self):
        if self._cho is None:
            try:
                self._cho = scipy.linalg.cho_factor(self.dense_precision())
            except scipy.linalg.LinAlgError as exc:
                raise NotPositiveDefiniteError(
                    f"dense Cholesky factorization failed: {exc}"
                ) from exc
        return self._cho


def build_posterior_system(model, scales, A=None, y=None, noise_variance=None,
                           ridge=1e-8, prior_op=None):
    """Assemble the Gaussian conditional of the image.

    ``scales`` is an :class:`AuxiliaryField` (or raw index array) fixing
    the variance of every filter row to base_variance/scale.  Without
    measurements the system holds the prior rows plus the ridge only.
    """
    if not isinstance(scales, AuxiliaryField):
        scales = AuxiliaryField(np.asarray(scales), model.scale_grid.num_scales)
    if scales.num_scales != model.scale_grid.num_scales:
        raise InvalidInputError("scale field does not match the model's grid")
    if scales.indices.shape[0] != model.filter_bank.num_filters:
        raise InvalidInputError("scale field must have one plane per filter")
    shape = scales.image_shape
    if shape[0] < 1 or shape[1] < 1:
        raise InvalidInputError("image shape must be positive")
    if ridge < 0:
        raise InvalidInputError("ridge must be non-negative")
    n = shape[0] * shape[1]
    if A is not None:
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[1] != n:
            raise InvalidInputError("measurement matrix must map the image pixels")
        if y is None:
            raise InvalidInputError("measurements require a target vector y")
        y = np.asarray(y, dtype=float).ravel()
        if y.shape[0] != A.shape[0]:
            raise InvalidInputError("y length must match the measurement rows")
        if noise_variance is None or not noise_variance > 0:
            raise InvalidInputError("measurements require a positive noise variance")
    if prior_op is None:
        prior_op = PriorOperator(model, shape)
    elif prior_op.shape != shape:
        raise InvalidInputError("prior operator was built for another shape")
    grid = model.scale_grid
    inv_var = (grid.scales[scales.indices] / grid.base_variance).ravel()
    return LinearGaussianSystem(shape, prior_op, inv_var, A, y, noise_variance,
                                float(ridge))


def _solve(system, b, options):
    n = system.n_unknowns
    method = options.method
    if method == "auto":
        method = "dense_cholesky" if n <= DENSE_SOLVER_LIMIT else "conjugate_gradient"
    if method == "dense_cholesky":
        return scipy.linalg.cho_solve(system._cholesky(), b)
    if method == "conjugate_gradient":
        op = LinearOperator((n, n), matvec=system.matvec)
        maxiter = options.cg_max_iters or 10 * n
        x, info = cg(op, b, rtol=options.cg_tolerance, atol=0.0, maxiter=maxiter)
        if info != 0:
            norm_b = np.linalg.norm(b)
            residual = np.linalg.norm(system.matvec(x) - b) / max(norm_b, 1e-300)
            raise SolverError(
                f"conjugate gradient did not reach tolerance "
                f"{options.cg_tolerance:g} within {maxiter} iterations",
                residual=residual,
            )
        return x
    raise InvalidInputError(f"unknown solver method {method!r}")


def posterior_mean(system, options):
    """Mean of the Gaussian conditional, as an image."""
    return _solve(system, system.rhs(), options).reshape(system.shape)


def sample_x_given_z(system, options, rng):
    """Exact draw from the Gaussian conditional, as an image."""
    return _solve(system, system.perturbed_rhs(rng), options).reshape(system.shape)


# ---------------------------------------------------------------------------
# categorical and Gamma moves


def sample_scales_given_x(model, image, rng, responses=None):
    """Draw the scale field from its conditional given the image.

    Each filter/position pair picks component n with probability
    proportional to weight_n times the Gaussian density of the response
    under variance base_variance/scale_n.
    """
    grid = model.scale_grid
    if responses is None:
        responses = prior.filter_responses(model, image)
    m = responses.shape[0]
    if m == 0:
        return AuxiliaryField(
            np.zeros((0, *np.asarray(image).shape), dtype=np.int64), grid.num_scales
        )
    weights = model.mixture_weights.weights[:, None, None, :]
    probs = prior.scale_responsibilities(responses, weights, grid)
    cumulative = probs.cumsum(axis=-1)
    u = rng.random(responses.shape + (1,))
    idx = (cumulative < u).sum(axis=-1)
    np.minimum(idx, grid.num_scales - 1, out=idx)
    return AuxiliaryField(idx, grid.num_scales)


def sample_noise_precision(y, A, image, rng):
    """Gamma draw for the noise precision given image and measurements.

    Shape is (rows of A)/2 + 1 and scale 2/||y - A x||^2; the squared
    residual is floored at 1e-12 so exact fits stay finite.
    """
    y = np.asarray(y, dtype=float).ravel()
    A = np.asarray(A, dtype=float)
    flat = np.asarray(image, dtype=float).ravel()
    if A.ndim != 2 or A.shape[0] != y.shape[0] or A.shape[1] != flat.shape[0]:
        raise InvalidInputError("measurement shapes are inconsistent")
    residual = y - A @ flat
    r2 = max(float(residual @ residual), _RESIDUAL_FLOOR)
    n_measurements = y.shape[0]
    return float(rng.gamma(shape=n_measurements / 2.0 + 1.0, scale=2.0 / r2))


# ---------------------------------------------------------------------------
# chain drivers


def _as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def run_restoration_chain(model, A, y, shape, *, iterations=200, burn_in=100,
                          options=None, rng=None, init="adjoint",
                          last_sample=False, resample_noise=True):
    """Restore an image from linear measurements by blocked Gibbs.

    Starts from the measurement adjoint A^T y (or a random image), runs
    ``iterations`` full sweeps and returns the average of the
    post-burn-in image samples (or the final sample when
    ``last_sample``), along with the final chain state and one
    diagnostics row per iteration.
    """
    if options is None:
        options = SolverOptions()
    rng = _as_generator(rng)
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    h, w = shape
    n = h * w
    if A.ndim != 2 or A.shape[1] != n:
        raise InvalidInputError("measurement matrix does not match the image shape")
    if y.shape[0] != A.shape[0]:
        raise InvalidInputError("y length must match the measurement rows")
    if iterations < 1:
        raise InvalidInputError("iterations must be at least one")
    if not 0 <= burn_in < iterations:
        raise InvalidInputError("burn-in must be non-negative and below iterations")

    if isinstance(init, str):
        if init == "adjoint":
            x = (A.T @ y).reshape(shape)
        elif init == "random":
            x = rng.random(shape)
        else:
            raise InvalidInputError(f"unknown init {init!r}")
    else:
        x = np.array(init, dtype=float)
        if x.shape != (h, w):
            raise InvalidInputError("init image does not match the shape")

    prior_op = PriorOperator(model, shape)
    ata = A.T @ A
    noise_precision = 1.0
    field_now = sample_scales_given_x(model, x, rng,
                                      responses=prior_op.responses(x))
    running_sum = np.zeros(shape)
    kept = 0
    diagnostics = []
    for it in range(1, iterations + 1):
        field_now = sample_scales_given_x(model, x, rng,
                                          responses=prior_op.responses(x))
        system = build_posterior_system(
            model, field_now, A=A, y=y,
            noise_variance=1.0 / noise_precision,
            ridge=options.ridge, prior_op=prior_op,
        )
        system.set_measurement_gram(ata)
        x = sample_x_given_z(system, options, rng)
        residual = y - A @ x.ravel()
        residual_sq = float(residual @ residual)
        if resample_noise:
            noise_precision = sample_noise_precision(y, A, x, rng)
        if it > burn_in:
            running_sum += x
            kept += 1
        diagnostics.append(IterationRecord(
            iteration=it,
            residual_sq=residual_sq,
            exponent=prior.log_prior_exponent(model, x),
            noise_precision=noise_precision,
        ))
    restored = x.copy() if last_sample else running_sum / kept
    state = GibbsChainState(
        image=x, scales=field_now, noise_precision=noise_precision,
        iteration=iterations, rng=rng,
    )
    return RestorationResult(image=restored, state=state, diagnostics=diagnostics)


def run_prior_chain(model, images, sweeps, options=None, rng=None):
    """Advance measurement-free chains by full z-then-x sweeps.

    ``images`` may be one image or a batch (B, H, W); the returned
    array has the same shape.  Used for negative samples during
    training and for drawing pictures from the prior.
    """
    if sweeps < 1:
        raise InvalidInputError("sweeps must be at least one")
    if options is None:
        options = SolverOptions()
    rng = _as_generator(rng)
    arr = np.array(images, dtype=float)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3:
        raise InvalidInputError("images must be 2-D or a batch of 2-D arrays")
    shape = arr.shape[1:]
    prior_op = PriorOperator(model, shape)
    out = np.empty_like(arr)
    for b in range(arr.shape[0]):
        x = arr[b]
        for _ in range(sweeps):
            field_now = sample_scales_given_x(
                model, x, rng, responses=prior_op.responses(x)
            )
            system = build_posterior_system(
                model, field_now, ridge=options.ridge, prior_op=prior_op
            )
            x = sample_x_given_z(system, options, rng)
        out[b] = x
    return out[0] if single else out
