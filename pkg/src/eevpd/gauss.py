"""Closed-form machinery for Gaussian targets under velocity Verlet.

For a Gaussian target with covariance eigenvalues ``{sigma_i^2}``, the
stationary distribution of unadjusted HMC/LMC is known exactly, and with it
the energy error variance per dimension (EEVPD), the asymptotic covariance
error, and the Wasserstein-2 distance to the target.  Everything here is a
function of the spectrum and the step size; no sampling is involved.  These
closed forms are the ground-truth oracle for the simulation-based tests.

Scalar building blocks, all in terms of ``y = eps^2 / sigma^2``:

- ``energy_error_variance(y)``: per-eigendirection Var[dH] at stationarity.
- ``covariance_error(y)``: per-eigendirection contribution to b2_cov.
- ``wasserstein_factor(y)``: per-eigendirection W2^2 contribution (times eps^2).

Conversion maps:

- ``phi``: smallest EEVPD that guarantees a given b2_cov for any spectrum.
- ``phi_w``: same for the (per-dimension, eps^2-scaled) squared W2 distance.

Both bounds are sharp exactly on isotropic spectra.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GaussSpectrum",
    "BoundReport",
    "energy_error_variance",
    "covariance_error",
    "wasserstein_factor",
    "stationary_spectrum",
    "eevpd_exact",
    "b2_exact",
    "wasserstein2_gauss",
    "phi",
    "phi_inv",
    "phi_w",
    "phi_w_inv",
    "verlet_matrix_1d",
    "bound_report",
    "covariance_bound_max_eps",
    "wasserstein_bound_max_eps",
    "optimal_bias_fraction",
    "optimal_eps",
    "PHI_DOMAIN_MAX",
    "PHI_VALUE_MAX",
    "PHI_W_VALUE_MAX",
    "Y_COV_BOUND_MAX",
    "Y_W_BOUND_MAX",
]

# Convexity region of phi: x < 11 - 4*sqrt(7), where phi(x) reaches ~0.397674.
PHI_DOMAIN_MAX = 11.0 - 4.0 * np.sqrt(7.0)
PHI_VALUE_MAX = (-134.0 + 52.0 * np.sqrt(7.0)) / 9.0
# phi_w is convex/monotone for y in (0, 3), i.e. values below E(3) = 27/4.
PHI_W_DOMAIN_MAX = 3.0
PHI_W_VALUE_MAX = 27.0 / 4.0
# Per-direction convexity edges.  The bias bounds follow from Jensen's
# inequality applied across eigendirections, so they are established only
# when EVERY y_i = eps^2/sigma_i^2 keeps the per-direction argument inside
# the convexity region: B(y_i) < 11 - 4 sqrt(7) for the covariance bound
# (y_i < 2(5 - sqrt(7))/3) and y_i < 3 for the Wasserstein bound.  The
# aggregate conditions EEVPD < 0.397 / < 6.75 coincide with these only for
# isotropic spectra; for anisotropic ones they are NOT sufficient (small
# violations occur once a direction leaves the convex region).
Y_COV_BOUND_MAX = 2.0 * (5.0 - np.sqrt(7.0)) / 3.0
Y_W_BOUND_MAX = 3.0

_BISECT_TOL = 1e-12
_BISECT_MAX_ITER = 200


@dataclass(frozen=True)
class GaussSpectrum:
    """Eigenvalues ``sigma_i^2`` of a Gaussian target's covariance matrix."""

    eigenvalues: np.ndarray

    def __post_init__(self):
        ev = np.atleast_1d(np.asarray(self.eigenvalues, dtype=float))
        if ev.ndim != 1 or ev.size == 0:
            raise ValueError("spectrum must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(ev)) or np.any(ev <= 0):
            raise ValueError("all eigenvalues must be finite and positive")
        object.__setattr__(self, "eigenvalues", ev)

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    def max_stable_eps(self) -> float:
        """Largest step size for which velocity Verlet is stable."""
        return 2.0 * float(np.sqrt(self.eigenvalues.min()))

    def is_stable(self, eps: float) -> bool:
        return 0.0 <= eps < self.max_stable_eps()


@dataclass(frozen=True)
class BoundReport:
    """Exact values and their bounds for one (spectrum, eps) pair."""

    eevpd: float
    b2_bound: float
    w2_bound_per_dim: float
    exact_b2: float
    exact_w2_per_dim: float


def _check_stability(spectrum: GaussSpectrum, eps: float) -> np.ndarray:
    ev = spectrum.eigenvalues
    if eps < 0:
        raise ValueError("step size must be non-negative")
    bad = eps * eps >= 4.0 * ev
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValueError(
            f"unstable step size eps={eps:g}: requires eps < 2*sigma, violated by "
            f"eigenvalue sigma^2={ev[i]:g} (index {i})"
        )
    return eps * eps / ev


def energy_error_variance(y):
    """Stationary Var[dH] of one Verlet step in one eigendirection.

    ``E(y) = y^3 / (16 (1 - y/4))`` with ``y = eps^2/sigma^2``; valid for y < 4.
    """
    y = np.asarray(y, dtype=float)
    return y**3 / (16.0 * (1.0 - y / 4.0))


def covariance_error(y):
    """Per-eigendirection contribution to the asymptotic b2_cov.

    ``B(y) = y^2 / (16 (1 - y/4)^2)``.
    """
    y = np.asarray(y, dtype=float)
    return y**2 / (16.0 * (1.0 - y / 4.0) ** 2)


def wasserstein_factor(y):
    """Per-eigendirection W2^2 factor: W2^2 = eps^2 * sum_i W(y_i).

    ``W(y) = 2 (1 - y/8 - sqrt(1 - y/4)) / (y (1 - y/4))``.  With
    ``s = sqrt(1 - y/4)`` the numerator equals ``(1 - s)^2``, which gives the
    cancellation-free form ``W(y) = y / (16 s^2 (1 + s)^2)`` used here; the
    y -> 0 limit is y/64.
    """
    y = np.asarray(y, dtype=float)
    s = np.sqrt(1.0 - y / 4.0)
    return y / (16.0 * s**2 * (1.0 + s) ** 2)


def stationary_spectrum(spectrum: GaussSpectrum, eps: float) -> GaussSpectrum:
    """Eigenvalues of the stationary covariance of unadjusted HMC/LMC.

    Each eigenvalue inflates to ``sigma^2 / (1 - eps^2 / 4 sigma^2)``.
    """
    y = _check_stability(spectrum, eps)
    return GaussSpectrum(spectrum.eigenvalues / (1.0 - y / 4.0))


def eevpd_exact(spectrum: GaussSpectrum, eps: float) -> float:
    """Exact EEVPD of a stable Verlet chain: mean of E(eps^2/sigma_i^2)."""
    y = _check_stability(spectrum, eps)
    return float(np.mean(energy_error_variance(y)))


def b2_exact(spectrum: GaussSpectrum, eps: float) -> float:
    """Exact asymptotic covariance error b2_cov of unadjusted HMC/LMC."""
    y = _check_stability(spectrum, eps)
    return float(np.mean(covariance_error(y)))


def wasserstein2_gauss(spectrum: GaussSpectrum, eps: float) -> float:
    """Exact squared W2 distance between target and stationary distribution."""
    y = _check_stability(spectrum, eps)
    return float(eps * eps * np.sum(wasserstein_factor(y)))


def _bisect(f, lo: float, hi: float, target: float) -> float:
    """Solve f(x) = target for increasing f on [lo, hi] to relative tol 1e-12."""
    flo, fhi = f(lo), f(hi)
    if not (flo <= target <= fhi):
        raise ValueError(f"target {target:g} outside bracket [{flo:g}, {fhi:g}]")
    for _ in range(_BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= _BISECT_TOL * max(hi, _BISECT_TOL):
            break
    return 0.5 * (lo + hi)


def phi(x: float) -> float:
    """EEVPD guaranteeing covariance error x: ``phi(x) = 4 x^{3/2} / (1 + x^{1/2})^2``.

    Restricted to the convexity region ``0 <= x < 11 - 4 sqrt(7)`` where the
    bound is proven.
    """
    if not 0.0 <= x < PHI_DOMAIN_MAX:
        raise ValueError(
            f"phi argument {x:g} outside convex region [0, {PHI_DOMAIN_MAX:.6f})"
        )
    s = np.sqrt(x)
    return float(4.0 * x * s / (1.0 + s) ** 2)


def phi_inv(v: float) -> float:
    """Covariance-error bound for a given EEVPD, valid for EEVPD < 0.397."""
    if not 0.0 <= v < PHI_VALUE_MAX:
        raise ValueError(
            f"phi_inv argument {v:g} outside [0, 0.397): the covariance bound "
            "is only established for EEVPD < 0.397"
        )
    if v == 0.0:
        return 0.0
    return _bisect(phi, 0.0, PHI_DOMAIN_MAX * (1.0 - 1e-14), v)


def _w_scalar(y: float) -> float:
    return float(wasserstein_factor(np.asarray(y)))


def phi_w(x: float) -> float:
    """EEVPD guaranteeing per-dimension squared W2 (in eps^2 units) of x.

    ``phi_w = E o W^{-1}``, evaluated by inverting W on y in [0, 3] where it
    is monotone; values of x up to W(3) = 1/3 are admissible.
    """
    w_max = _w_scalar(PHI_W_DOMAIN_MAX)
    if not 0.0 <= x <= w_max:
        raise ValueError(
            f"phi_w argument {x:g} outside [0, {w_max:g}] (the proven region)"
        )
    if x == 0.0:
        return 0.0
    y = _bisect(_w_scalar, 0.0, PHI_W_DOMAIN_MAX, x)
    return float(energy_error_variance(y))


def phi_w_inv(v: float) -> float:
    """Per-dimension squared-W2 bound (in eps^2 units) for a given EEVPD.

    Valid for EEVPD < 6.75; the Wasserstein bound is
    ``W2^2 / d <= eps^2 * phi_w_inv(EEVPD)``.
    """
    if not 0.0 <= v < PHI_W_VALUE_MAX:
        raise ValueError(
            f"phi_w_inv argument {v:g} outside [0, 6.75): the Wasserstein bound "
            "is only established for EEVPD < 6.75"
        )
    if v == 0.0:
        return 0.0
    y = _bisect(lambda t: float(energy_error_variance(t)), 0.0, PHI_W_DOMAIN_MAX, v)
    return _w_scalar(y)


def verlet_matrix_1d(sigma2: float, eps: float) -> np.ndarray:
    """Exact one-step velocity Verlet map for a 1-d Gaussian, as a 2x2 matrix.

    With ``y = eps^2/sigma^2``, ``alpha = (1 - y/4)^{-1/2}`` and
    ``sin h = sqrt(y)/alpha`` the map is
    ``[[cos h, alpha sigma sin h], [-sin h/(alpha sigma), cos h]]``.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    y = eps * eps / sigma2
    if y >= 4.0:
        raise ValueError(f"unstable step size: eps^2/sigma^2 = {y:g} >= 4")
    sigma = np.sqrt(sigma2)
    alpha = (1.0 - y / 4.0) ** -0.5
    sin_h = np.sqrt(y) / alpha
    cos_h = 1.0 - y / 2.0
    return np.array(
        [
            [cos_h, alpha * sigma * sin_h],
            [-sin_h / (alpha * sigma), cos_h],
        ]
    )


def covariance_bound_max_eps(spectrum: GaussSpectrum) -> float:
    """Largest eps for which the covariance bound is proven for this spectrum.

    Requires every eigendirection inside phi's convexity region:
    ``eps <= sqrt(2 (5 - sqrt 7) / 3) * sigma_min``.
    """
    return float(np.sqrt(Y_COV_BOUND_MAX * spectrum.eigenvalues.min()))


def wasserstein_bound_max_eps(spectrum: GaussSpectrum) -> float:
    """Largest eps for which the Wasserstein bound is proven for this spectrum.

    Requires ``eps <= sqrt(3) * sigma_min`` (every direction inside phi_w's
    convexity region).
    """
    return float(np.sqrt(Y_W_BOUND_MAX * spectrum.eigenvalues.min()))


def bound_report(spectrum: GaussSpectrum, eps: float) -> BoundReport:
    """Evaluate exact quantities and their EEVPD-based bounds at one step size.

    The bounds are guaranteed only when eps is below
    ``covariance_bound_max_eps`` / ``wasserstein_bound_max_eps``; beyond
    those, anisotropic spectra can exceed them slightly.
    """
    v = eevpd_exact(spectrum, eps)
    d = spectrum.dim
    return BoundReport(
        eevpd=v,
        b2_bound=phi_inv(v),
        w2_bound_per_dim=eps * eps * phi_w_inv(v),
        exact_b2=b2_exact(spectrum, eps),
        exact_w2_per_dim=wasserstein2_gauss(spectrum, eps) / d,
    )


def optimal_bias_fraction() -> float:
    """Fraction of squared RMSE optimally spent on squared bias: 1/5.

    From minimizing ``c_b eps^4 + c_v / eps`` over the step size.
    """
    return 0.2


def optimal_eps(c_v: float, c_b: float) -> float:
    """Minimizer of ``RMSE^2(eps) = c_b eps^4 + c_v / eps``."""
    if c_v <= 0 or c_b <= 0:
        raise ValueError("coefficients must be positive")
    return float((c_v / (4.0 * c_b)) ** 0.2)
