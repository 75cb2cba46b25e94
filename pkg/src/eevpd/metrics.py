"""Error functionals and streaming moment estimation.

``b2_cov`` is the scalar covariance-matrix error
``Tr[(I - Sigma_p^{-1} Sigma_q)^2] / d``: a divergence on SPD matrices,
calibrated so that n exact Gaussian samples give expectation ``(d+1)/n``,
and invariant under linear changes of basis.  ``b2_avg`` is the average
per-coordinate squared error of second moments, normalized by Var[x_i^2]
(0.01 corresponds to the accuracy of 100 effective samples).

``RunningMoments`` is a Welford-style accumulator that supports leading
batch axes (one accumulator slot per chain), block pushes, and associative
merging, so chains can run independently and combine afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "RunningMoments",
    "ErrorReport",
    "b2_cov",
    "b2_per_dim",
    "b2_avg",
    "basis_change_check",
    "tau_int_gauss",
    "median_curve",
    "first_crossing",
    "bootstrap_error",
    "BootstrapResult",
    "CSV_COLUMNS",
]

# d above which full covariance matrices are no longer accumulated by default.
FULL_COV_DIM_LIMIT = 512


class RunningMoments:
    """Streaming mean/covariance accumulator with batch slots.

    ``shape`` is the leading slot shape (e.g. ``(n_chains,)``; default
    scalar).  With ``full=True`` a (d, d) comoment is kept per slot,
    otherwise only the diagonal.  ``push`` takes one observation per slot;
    ``push_block`` takes a block of ``t`` observations, shape
    ``(t,) + shape + (d,)``.  ``merge`` combines accumulators from disjoint
    sample streams and is associative up to float rounding.
    """

    def __init__(self, dim: int, shape: tuple = (), full: bool = False):
        self.dim = int(dim)
        self.shape = tuple(shape)
        self.full = bool(full)
        self.count = np.zeros(self.shape)
        self.mean = np.zeros(self.shape + (dim,))
        if full:
            self.comoment = np.zeros(self.shape + (dim, dim))
        else:
            self.comoment = np.zeros(self.shape + (dim,))

    def push(self, x: np.ndarray):
        self.push_block(np.asarray(x, dtype=float)[None, ...])

    def push_block(self, block: np.ndarray):
        block = np.asarray(block, dtype=float)
        t = block.shape[0]
        if t == 0:
            return
        if block.shape[1:] != self.shape + (self.dim,):
            raise ValueError(f"block shape {block.shape} incompatible with accumulator")
        b_mean = block.mean(axis=0)
        centered = block - b_mean
        if self.full:
            # batched X^T X over the block axis
            moved = np.moveaxis(centered, 0, -1)  # shape + (d, t)
            b_co = moved @ np.swapaxes(moved, -1, -2)
        else:
            b_co = np.einsum("t...d,t...d->...d", centered, centered)
        self._merge_raw(float(t), b_mean, b_co)

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if (other.dim, other.shape, other.full) != (self.dim, self.shape, self.full):
            raise ValueError("incompatible accumulators")
        self._merge_raw(other.count, other.mean, other.comoment)
        return self

    def _merge_raw(self, n_b, mean_b, co_b):
        n_a = self.count
        n_ab = n_a + n_b
        safe = np.where(n_ab > 0, n_ab, 1.0)
        delta = mean_b - self.mean
        w = np.asarray(n_a * n_b / safe)
        self.mean = self.mean + delta * np.asarray(n_b / safe)[..., None]
        if self.full:
            self.comoment = self.comoment + co_b + w[..., None, None] * (
                delta[..., :, None] * delta[..., None, :]
            )
        else:
            self.comoment = self.comoment + co_b + w[..., None] * delta * delta
        self.count = n_ab

    def covariance(self) -> np.ndarray:
        """Population covariance (or its diagonal), per slot."""
        n = np.where(self.count > 0, self.count, 1.0)
        if self.full:
            return self.comoment / n[..., None, None]
        return self.comoment / n[..., None]

    def variance(self) -> np.ndarray:
        cov = self.covariance()
        if self.full:
            return np.diagonal(cov, axis1=-2, axis2=-1)
        return cov

    def second_moment(self) -> np.ndarray:
        """E[x_i^2] per coordinate, per slot."""
        return self.variance() + self.mean**2

    def second_moment_matrix(self) -> np.ndarray:
        """E[x x^T] per slot (full mode only)."""
        if not self.full:
            raise ValueError("full=True required for the second-moment matrix")
        return self.covariance() + self.mean[..., :, None] * self.mean[..., None, :]

    def pooled(self) -> "RunningMoments":
        """Merge all slots into a single scalar-slot accumulator."""
        out = RunningMoments(self.dim, shape=(), full=self.full)
        flat_n = self.count.reshape(-1)
        flat_mean = self.mean.reshape(-1, self.dim)
        co_shape = (-1, self.dim, self.dim) if self.full else (-1, self.dim)
        flat_co = self.comoment.reshape(*co_shape)
        for i in range(flat_n.size):
            out._merge_raw(flat_n[i], flat_mean[i], flat_co[i])
        return out


@dataclass
class ErrorReport:
    """Scores of one chain (or pooled run) against ground truth."""

    b2_cov: float
    b2_avg: float
    per_dim: np.ndarray
    grad_calls: int
    divergent_fraction: float = 0.0

    def __post_init__(self):
        self.per_dim = np.asarray(self.per_dim, dtype=float)
        if self.per_dim.size and not np.isclose(self.b2_avg, float(self.per_dim.mean())):
            raise ValueError("b2_avg must equal the mean of per_dim")


CSV_COLUMNS = [
    "model",
    "sampler",
    "eps",
    "L",
    "eevpd_target",
    "grad_calls",
    "b2_cov",
    "b2_avg",
    "divergent_fraction",
    "chain_id",
    "seed",
]


def b2_cov(truth, estimate) -> float:
    """Covariance error ``Tr[(I - Sigma_p^{-1} Sigma_q)^2] / d``.

    Full-matrix for (d, d) inputs (Sigma_p applied via Cholesky solve);
    1-d inputs are treated as diagonals, giving the mean squared relative
    variance error.
    """
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.ndim == 1:
        if np.any(truth <= 0):
            raise ValueError("diagonal truth must be positive")
        return float(np.mean(((truth - estimate) / truth) ** 2))
    d = truth.shape[0]
    try:
        chol = cho_factor(truth, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("truth covariance must be symmetric positive-definite") from exc
    R = np.eye(d) - cho_solve(chol, estimate)
    return float(np.sum(R * R.T) / d)


def b2_per_dim(truth, second_moments) -> np.ndarray:
    """Per-coordinate squared second-moment error, normalized by Var[x_i^2]."""
    est = np.asarray(second_moments, dtype=float)
    smv = truth.second_moment_variance
    if np.any(smv <= 0):
        raise ValueError("second_moment_variance must be positive")
    return (est - truth.second_moment) ** 2 / smv


def b2_avg(truth, moments) -> float | np.ndarray:
    """Average of ``b2_per_dim`` over coordinates.

    ``moments`` may be a RunningMoments accumulator or an array of
    per-coordinate second-moment estimates.
    """
    est = moments.second_moment() if isinstance(moments, RunningMoments) else moments
    return np.mean(b2_per_dim(truth, est), axis=-1)


def basis_change_check(truth, estimate, A) -> tuple[float, float]:
    """b2_cov before and after conjugating both matrices by A."""
    A = np.asarray(A, dtype=float)
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= s[0] * 1e-13:
        raise ValueError("basis change matrix is singular")
    before = b2_cov(truth, estimate)
    after = b2_cov(A @ truth @ A.T, A @ estimate @ A.T)
    return before, after


def tau_int_gauss(rho: float, n: int) -> float:
    """Finite-n integrated autocorrelation time for geometric correlations.

    ``tau = (1+rho)/(1-rho) * (1 - (2 rho / n) (1 - rho^n) / (1 - rho^2))``;
    rho = 0 gives 1, and n -> inf recovers (1+rho)/(1-rho).
    """
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must be in (-1, 1)")
    if n < 1:
        raise ValueError("n must be >= 1")
    if rho == 0.0:
        return 1.0
    lead = (1.0 + rho) / (1.0 - rho)
    corr = 1.0 - (2.0 * rho / n) * (1.0 - rho**n) / (1.0 - rho**2)
    return float(lead * corr)


def median_curve(values, grids=None) -> np.ndarray:
    """Pointwise median across chains of aligned error curves.

    ``values`` has shape (n_chains, n_points).  When per-chain ``grids``
    are supplied they must be identical across chains.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] < 2:
        raise ValueError("need at least 2 aligned chains")
    if grids is not None:
        grids = np.asarray(grids)
        if grids.ndim == 2:
            if not np.all(grids == grids[0]):
                raise ValueError("misaligned curve grids")
        elif grids.shape[-1] != values.shape[1]:
            raise ValueError("grid length does not match curves")
    return np.median(values, axis=0)


def first_crossing(grid, values, threshold: float) -> float:
    """First grid point at which the curve drops below the threshold (nan if never reached)."""
    values = np.asarray(values, dtype=float)
    below = np.nonzero(values < threshold)[0]
    if below.size == 0:
        return float("nan")
    return float(np.asarray(grid)[below[0]])


@dataclass
class BootstrapResult:
    relative_error: float
    point_estimate: float
    n_censored: int
    crossings: np.ndarray = field(repr=False, default=None)


def bootstrap_error(values, grid, threshold: float, resamples: int = 100, seed: int = 0) -> BootstrapResult:
    """Bootstrap the grads-to-threshold of the median curve over chains.

    Resamples chains with replacement ``resamples`` times; each resample's
    median-curve crossing contributes to the spread.  Resamples that never
    reach the threshold contribute the run length (censoring value) and are
    counted in ``n_censored``.  The reported error is the standard deviation
    of the crossings relative to the full-set point estimate.
    """
    values = np.asarray(values, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if resamples < 2:
        raise ValueError("resamples must be >= 2")
    n_chains = values.shape[0]
    point = first_crossing(grid, median_curve(values, None), threshold)
    if np.isnan(point):
        point = float(grid[-1])
    rng = np.random.default_rng(seed)
    crossings = np.empty(resamples)
    n_censored = 0
    for k in range(resamples):
        idx = rng.integers(0, n_chains, size=n_chains)
        med = np.median(values[idx], axis=0)
        c = first_crossing(grid, med, threshold)
        if np.isnan(c):
            c = float(grid[-1])
            n_censored += 1
        crossings[k] = c
    rel = float(np.std(crossings) / point) if point > 0 else float("nan")
    return BootstrapResult(rel, point, n_censored, crossings)
