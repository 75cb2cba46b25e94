"""Target distributions: the differentiable contract and benchmark families.

Every target exposes an unnormalized negative log density ``L(x)`` with
``p(x) = exp(-L(x))/Z``, its gradient, and (where available) ground-truth
moments used for error scoring.  Evaluation is batched over leading axes:
``x`` of shape ``(..., d)`` maps to ``(...,)`` / ``(..., d)``.  All models
are pure and safe to evaluate concurrently from many chains.

Benchmark families:

- standard Gaussian,
- ill-conditioned Gaussian (log-spaced spectrum, optional random rotation),
- product of 2-d Rosenbrock bananas (exactly samplable),
- hierarchical funnel with synthetic observations.

String identifiers (``gauss-std``, ``gauss-ill:d=100,kappa=1000``,
``rosenbrock``, ``funnel``, ``product(<block>,<K>)``) are resolved by
``parse_model`` for the CLI and config files.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

__all__ = [
    "GroundTruth",
    "TargetModel",
    "GaussTarget",
    "RosenbrockBlock",
    "Funnel",
    "ProductTarget",
    "PreconditionedTarget",
    "make_standard_gaussian",
    "make_ill_conditioned_gaussian",
    "make_rosenbrock_product",
    "make_funnel",
    "make_product",
    "precondition",
    "check_gradient",
    "parse_model",
]

_DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class GroundTruth:
    """Reference moments of a target, used to score sampler output.

    ``cov`` is the full covariance matrix when tractable, else None (the
    diagonal ``var`` is always present).  ``second_moment_variance`` holds
    Var[x_i^2], the normalizer of the per-coordinate second-moment error.
    ``provenance`` is one of ``analytic``, ``exact-sampler``, ``long-chain``.
    """

    mean: np.ndarray
    var: np.ndarray
    second_moment_variance: np.ndarray
    cov: np.ndarray | None = None
    provenance: str = "analytic"

    def __post_init__(self):
        for name in ("mean", "var", "second_moment_variance"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.cov is not None:
            cov = np.asarray(self.cov, dtype=float)
            if not np.allclose(cov, cov.T, atol=1e-10):
                raise ValueError("cov must be symmetric")
            np.linalg.cholesky(cov)  # raises if not positive definite
            object.__setattr__(self, "cov", cov)
        if np.any(self.second_moment_variance <= 0):
            raise ValueError("second_moment_variance entries must be positive")

    @property
    def second_moment(self) -> np.ndarray:
        return self.var + self.mean**2


class TargetModel(abc.ABC):
    """Differentiable unnormalized log-density contract."""

    dim: int

    @abc.abstractmethod
    def neg_log_density(self, x: np.ndarray) -> np.ndarray:
        """L(x), batched over leading axes."""

    @abc.abstractmethod
    def gradient(self, x: np.ndarray) -> np.ndarray:
        """grad L(x), batched over leading axes."""

    def nld_and_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Value and gradient together; override when they share work."""
        return self.neg_log_density(x), self.gradient(x)

    @property
    def truth(self) -> GroundTruth | None:
        return None

    def sample_exact(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw exact samples where the family admits them."""
        raise NotImplementedError(f"{type(self).__name__} has no exact sampler")

    @property
    def has_exact_sampler(self) -> bool:
        try:
            self.sample_exact(np.random.default_rng(0), 1)
        except NotImplementedError:
            return False
        return True


class GaussTarget(TargetModel):
    """Centered Gaussian with a given spectrum and optional rotation.

    ``L(x) = 0.5 * x^T Sigma^{-1} x`` with ``Sigma = R diag(spectrum) R^T``.
    """

    def __init__(self, spectrum, rotation=None):
        spectrum = np.atleast_1d(np.asarray(spectrum, dtype=float))
        if np.any(spectrum <= 0) or not np.all(np.isfinite(spectrum)):
            raise ValueError("spectrum entries must be finite and positive")
        self.spectrum = spectrum
        self.dim = spectrum.size
        if rotation is not None:
            rotation = np.asarray(rotation, dtype=float)
            if rotation.shape != (self.dim, self.dim):
                raise ValueError("rotation must be d x d")
            if not np.allclose(rotation @ rotation.T, np.eye(self.dim), atol=1e-12):
                raise ValueError("rotation must be orthogonal to 1e-12")
        self.rotation = rotation
        self._inv_spectrum = 1.0 / spectrum
        if rotation is None:
            cov = np.diag(spectrum)
            self._precision = None
        else:
            cov = (rotation * spectrum) @ rotation.T
            self._precision = (rotation * self._inv_spectrum) @ rotation.T
        var = np.diag(cov).copy()
        self._truth = GroundTruth(
            mean=np.zeros(self.dim),
            var=var,
            second_moment_variance=2.0 * var**2,
            cov=cov,
            provenance="analytic",
        )

    def neg_log_density(self, x):
        x = np.asarray(x, dtype=float)
        if self.rotation is None:
            return 0.5 * np.sum(x * x * self._inv_spectrum, axis=-1)
        z = x @ self.rotation
        return 0.5 * np.sum(z * z * self._inv_spectrum, axis=-1)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.rotation is None:
            return x * self._inv_spectrum
        return x @ self._precision

    def nld_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        if self.rotation is None:
            g = x * self._inv_spectrum
        else:
            g = x @ self._precision
        return 0.5 * np.sum(x * g, axis=-1), g

    @property
    def truth(self):
        return self._truth

    def sample_exact(self, rng, n):
        z = rng.standard_normal((n, self.dim)) * np.sqrt(self.spectrum)
        return z if self.rotation is None else z @ self.rotation.T


def make_standard_gaussian(d: int) -> GaussTarget:
    """Standard Gaussian N(0, I_d): ``L(x) = ||x||^2 / 2``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return GaussTarget(np.ones(d))


def make_ill_conditioned_gaussian(
    d: int, kappa: float, seed: int = 0, rotate: bool = False
) -> GaussTarget:
    """Gaussian with eigenvalues log-spaced from 1 to kappa.

    With ``rotate=True`` the eigenbasis is a random orthogonal matrix drawn
    deterministically from ``seed``; the default is axis-aligned.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    if kappa < 1.0:
        raise ValueError("kappa must be >= 1")
    spectrum = np.logspace(0.0, np.log10(kappa), d) if kappa > 1 else np.ones(d)
    rotation = None
    if rotate:
        rng = np.random.default_rng(np.random.Philox(key=np.uint64([seed, 0xA0])))
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        rotation = q * np.sign(np.diag(r))
    return GaussTarget(spectrum, rotation)


class RosenbrockBlock(TargetModel):
    """2-d banana: x ~ N(1, 1), y | x ~ N(x^2, q).

    ``L(x, y) = (x - 1)^2 / 2 + (y - x^2)^2 / (2 q)``.
    """

    dim = 2

    def __init__(self, q: float = 0.1):
        if q <= 0:
            raise ValueError("q must be positive")
        self.q = float(q)

    def neg_log_density(self, x):
        x = np.asarray(x, dtype=float)
        a, b = x[..., 0], x[..., 1]
        return 0.5 * (a - 1.0) ** 2 + 0.5 * (b - a * a) ** 2 / self.q

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        a, b = x[..., 0], x[..., 1]
        resid = b - a * a
        g = np.empty_like(x)
        g[..., 0] = (a - 1.0) - 2.0 * a * resid / self.q
        g[..., 1] = resid / self.q
        return g

    @property
    def truth(self):
        return _rosenbrock_truth(self.q)

    def sample_exact(self, rng, n):
        a = 1.0 + rng.standard_normal(n)
        b = a * a + np.sqrt(self.q) * rng.standard_normal(n)
        return np.stack([a, b], axis=-1)


@lru_cache(maxsize=8)
def _rosenbrock_truth(q: float, n_draws: int = 10_000_000) -> GroundTruth:
    """Ground truth for one banana block from exact sampling.

    Streams ``n_draws`` exact samples (fixed internal seed) through moment
    accumulators; analytic values exist for this block and the module tests
    cross-check the estimates against them.
    """
    rng = np.random.default_rng(np.random.Philox(key=np.uint64([0x7052, 0])))
    block = RosenbrockBlock(q)
    s1 = np.zeros(2)
    s2 = np.zeros((2, 2))
    s4 = np.zeros(2)
    chunk = 1_000_000
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        x = block.sample_exact(rng, m)
        s1 += x.sum(axis=0)
        s2 += x.T @ x
        s4 += (x**4).sum(axis=0)
        done += m
    mean = s1 / n_draws
    second = s2 / n_draws
    cov = second - np.outer(mean, mean)
    var = np.diag(cov).copy()
    fourth = s4 / n_draws
    smv = fourth - np.diag(second) ** 2
    return GroundTruth(
        mean=mean,
        var=var,
        second_moment_variance=smv,
        cov=cov,
        provenance="exact-sampler",
    )


class ProductTarget(TargetModel):
    """K independent copies of a base block, concatenated."""

    def __init__(self, block: TargetModel, copies: int):
        if copies < 1:
            raise ValueError("copies must be >= 1")
        self.block = block
        self.copies = int(copies)
        self.dim = block.dim * self.copies

    def _blocked(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(x.shape[:-1] + (self.copies, self.block.dim))

    def neg_log_density(self, x):
        return self.block.neg_log_density(self._blocked(x)).sum(axis=-1)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        g = self.block.gradient(self._blocked(x))
        return g.reshape(x.shape)

    def nld_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        nld, g = self.block.nld_and_grad(self._blocked(x))
        return nld.sum(axis=-1), g.reshape(x.shape)

    @property
    def truth(self):
        bt = self.block.truth
        if bt is None:
            return None
        cov = None
        if bt.cov is not None:
            cov = np.kron(np.eye(self.copies), bt.cov)
        return GroundTruth(
            mean=np.tile(bt.mean, self.copies),
            var=np.tile(bt.var, self.copies),
            second_moment_variance=np.tile(bt.second_moment_variance, self.copies),
            cov=cov,
            provenance=bt.provenance,
        )

    def sample_exact(self, rng, n):
        draws = self.block.sample_exact(rng, n * self.copies)
        return draws.reshape(n, self.dim)


def make_rosenbrock_product(copies: int = 18, q: float = 0.1) -> ProductTarget:
    """Product of 2-d Rosenbrock bananas: total dimension 2 * copies."""
    return ProductTarget(RosenbrockBlock(q), copies)


def make_product(block: TargetModel, copies: int) -> ProductTarget:
    """Product of independent copies of ``block``."""
    if block.truth is None:
        raise ValueError("block must carry ground truth")
    return ProductTarget(block, copies)


class Funnel(TargetModel):
    """Hierarchical funnel posterior with synthetic observations.

    Parameters are ``(theta, z_1..z_n)`` with prior ``theta ~ N(0, 3^2)``,
    ``z_i ~ N(0, e^theta)`` and likelihood ``y_i ~ N(z_i, 1)``.  The
    observations are generated once from ``seed`` at ``theta_true = 0`` and
    stored on the model, so every sampler sees identical data.
    """

    def __init__(self, latent_dim: int = 100, seed: int = 0):
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        self.latent_dim = int(latent_dim)
        self.dim = self.latent_dim + 1
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.Philox(key=np.uint64([seed, 0xF])))
        self.z_true = rng.standard_normal(self.latent_dim)  # theta_true = 0
        self.data = self.z_true + rng.standard_normal(self.latent_dim)
        self._truth = _load_funnel_reference(self.latent_dim, self.seed)

    def neg_log_density(self, x):
        x = np.asarray(x, dtype=float)
        theta, z = x[..., 0], x[..., 1:]
        e = np.exp(-theta)
        prior_theta = theta * theta / 18.0
        prior_z = 0.5 * e * np.sum(z * z, axis=-1) + 0.5 * self.latent_dim * theta
        like = 0.5 * np.sum((z - self.data) ** 2, axis=-1)
        return prior_theta + prior_z + like

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        theta, z = x[..., 0], x[..., 1:]
        e = np.exp(-theta)
        g = np.empty_like(x)
        g[..., 0] = theta / 9.0 - 0.5 * e * np.sum(z * z, axis=-1) + 0.5 * self.latent_dim
        g[..., 1:] = z * e[..., None] + (z - self.data)
        return g

    def nld_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        theta, z = x[..., 0], x[..., 1:]
        e = np.exp(-theta)
        zz = np.sum(z * z, axis=-1)
        resid = z - self.data
        nld = (
            theta * theta / 18.0
            + 0.5 * e * zz
            + 0.5 * self.latent_dim * theta
            + 0.5 * np.sum(resid * resid, axis=-1)
        )
        g = np.empty_like(x)
        g[..., 0] = theta / 9.0 - 0.5 * e * zz + 0.5 * self.latent_dim
        g[..., 1:] = z * e[..., None] + resid
        return nld, g

    @property
    def truth(self):
        return self._truth


def _load_funnel_reference(latent_dim: int, seed: int) -> GroundTruth | None:
    path = _DATA_DIR / f"funnel_ref_d{latent_dim}_s{seed}.npz"
    if not path.exists():
        return None
    with np.load(path) as f:
        return GroundTruth(
            mean=f["mean"],
            var=f["var"],
            second_moment_variance=f["second_moment_variance"],
            cov=f["cov"] if "cov" in f else None,
            provenance="long-chain",
        )


def make_funnel(latent_dim: int = 100, seed: int = 0) -> Funnel:
    """Funnel posterior in ``latent_dim + 1`` dimensions."""
    return Funnel(latent_dim, seed)


class PreconditionedTarget(TargetModel):
    """Fixed diagonal rescaling of coordinates: samples live in x / scales.

    Equivalent to a diagonal mass matrix but keeps one integrator code
    path.  Ground-truth moments are transformed into the rescaled space;
    both b2_cov and the per-coordinate second-moment error are invariant
    under this map, so scores agree with the original space.
    """

    def __init__(self, base: TargetModel, scales):
        scales = np.asarray(scales, dtype=float)
        if scales.shape != (base.dim,) or np.any(scales <= 0):
            raise ValueError("scales must be positive with shape (d,)")
        self.base = base
        self.scales = scales
        self.dim = base.dim

    def neg_log_density(self, x):
        return self.base.neg_log_density(np.asarray(x) * self.scales)

    def gradient(self, x):
        return self.base.gradient(np.asarray(x) * self.scales) * self.scales

    def nld_and_grad(self, x):
        nld, g = self.base.nld_and_grad(np.asarray(x) * self.scales)
        return nld, g * self.scales

    @property
    def truth(self):
        bt = self.base.truth
        if bt is None:
            return None
        s = self.scales
        return GroundTruth(
            mean=bt.mean / s,
            var=bt.var / s**2,
            second_moment_variance=bt.second_moment_variance / s**4,
            cov=None if bt.cov is None else bt.cov / np.outer(s, s),
            provenance=bt.provenance,
        )

    def sample_exact(self, rng, n):
        return self.base.sample_exact(rng, n) / self.scales


def precondition(target: TargetModel, scales=None) -> TargetModel:
    """Rescale coordinates by per-coordinate scales (default: truth stddevs)."""
    if scales is None:
        if target.truth is None:
            raise ValueError("no scales given and target has no ground truth")
        scales = np.sqrt(target.truth.var)
    return PreconditionedTarget(target, scales)


def check_gradient(
    model: TargetModel,
    n_points: int = 32,
    seed: int = 0,
    step: float = 1e-5,
) -> float:
    """Max relative error of grad L vs central finite differences.

    Probes ``n_points`` random points (exact samples when the model has a
    sampler, else standard normal); the step is scaled by the coordinate
    magnitude.
    """
    rng = np.random.default_rng(seed)
    try:
        points = model.sample_exact(rng, n_points)
    except NotImplementedError:
        points = rng.standard_normal((n_points, model.dim))
    worst = 0.0
    for x in points:
        g = model.gradient(x)
        fd = np.empty_like(g)
        for i in range(model.dim):
            h = step * max(1.0, abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (model.neg_log_density(xp) - model.neg_log_density(xm)) / (2 * h)
        denom = max(float(np.linalg.norm(g)), 1e-12)
        worst = max(worst, float(np.linalg.norm(fd - g)) / denom)
    return worst


def _parse_kwargs(text: str) -> dict:
    out = {}
    if not text:
        return out
    for part in text.split(","):
        key, _, val = part.partition("=")
        key = key.strip()
        val = val.strip()
        if key in ("d", "copies", "seed", "latent_dim"):
            out[key] = int(val)
        elif key in ("kappa", "q"):
            out[key] = float(val)
        elif key == "rotate":
            out[key] = val.lower() in ("1", "true", "yes")
        else:
            raise ValueError(f"unknown model parameter {key!r}")
    return out


def parse_model(spec: str) -> TargetModel:
    """Resolve a model identifier string to a TargetModel.

    Examples: ``gauss-std``, ``gauss-std:d=64``,
    ``gauss-ill:d=100,kappa=1000``, ``rosenbrock:copies=18,q=0.1``,
    ``funnel:latent_dim=100,seed=0``, ``product(gauss-std:d=1,64)``.
    """
    spec = spec.strip()
    if spec.startswith("product(") and spec.endswith(")"):
        inner = spec[len("product(") : -1]
        block_spec, _, copies = inner.rpartition(",")
        if not block_spec:
            raise ValueError("product() needs a block id and a copy count")
        return make_product(parse_model(block_spec), int(copies))
    name, _, args = spec.partition(":")
    kw = _parse_kwargs(args)
    if name == "gauss-std":
        return make_standard_gaussian(kw.pop("d", 100))
    if name == "gauss-ill":
        return make_ill_conditioned_gaussian(
            kw.pop("d", 100), kw.pop("kappa", 1000.0), kw.pop("seed", 0), kw.pop("rotate", False)
        )
    if name == "rosenbrock":
        return make_rosenbrock_product(kw.pop("copies", 18), kw.pop("q", 0.1))
    if name == "rosenbrock-block":
        return RosenbrockBlock(kw.pop("q", 0.1))
    if name == "funnel":
        return make_funnel(kw.pop("latent_dim", 100), kw.pop("seed", 0))
    raise ValueError(f"unknown model id {name!r}")
