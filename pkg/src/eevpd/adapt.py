"""EEVPD estimation and the step-size controller.

The controller drives the integrator step size so that the variance of the
one-step energy error per dimension (EEVPD) matches a target ``alpha``
derived from a user bias tolerance.  Each step yields a predictor

    xi = dH^2 / (d * alpha * eps^6),

whose ``xi^{-1/6}`` is the step size at which the ``eps^6`` scaling law
would put the EEVPD exactly at ``alpha``.  Predictions are pooled with a
log-normal trust weight and an exponential forgetting factor
``gamma = (n-1)/(n+1)`` (n = 50), and the step size is set to the pooled
prediction:

    A <- gamma A + xi w(xi);  B <- gamma B + w(xi);  eps <- (A/B)^{-1/6}.

The trust weight damps predictions that extrapolate far from the current
step size: with ``eps_hat = xi^{-1/6}`` the predicted optimum, the weight
is ``exp(-log(eps_hat/eps)^2 / (2 sigma_xi^2))`` with sigma_xi = 1.5,
equivalently ``weight(xi * eps^6, 6 sigma_xi)``.  This is invariant under
rescaling the problem's units; centering the penalty at xi = 1 instead
(which coincides with it only when eps is near 1) would let the weight's
peak, not the data, set the fixed point once per-step energy errors
scatter, and the converged EEVPD would miss ``alpha`` by large factors.

``budget_from_rmse`` converts a relative RMSE tolerance into the bias
tolerance (one fifth of the squared error budget goes to squared bias) and
the EEVPD target ``phi(bias^2)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .gauss import phi, phi_inv

__all__ = [
    "GAMMA_DEFAULT",
    "SIGMA_XI_DEFAULT",
    "EevpdAccumulator",
    "eevpd_update",
    "AdapterState",
    "AdaptationError",
    "predictor_xi",
    "weight",
    "adapter_step",
    "BiasBudget",
    "budget_from_rmse",
    "budget_from_bias",
    "budget_from_eevpd",
    "default_init_eps",
    "default_decoherence_length",
    "run_adaptation",
    "AdaptationResult",
]

# forgetting factor gamma = (n-1)/(n+1) with n = 50
GAMMA_DEFAULT = 49.0 / 51.0
SIGMA_XI_DEFAULT = 1.5
MAX_HALVINGS_DEFAULT = 20


@dataclass
class EevpdAccumulator:
    """Streaming Var[dH]/d estimate; fields may carry per-chain slots."""

    dim: int
    count: float | np.ndarray = 0.0
    mean: float | np.ndarray = 0.0
    mean_sq: float | np.ndarray = 0.0

    def updated(self, delta_h) -> "EevpdAccumulator":
        dh = np.asarray(delta_h, dtype=float)
        if not np.all(np.isfinite(dh)):
            raise ValueError("non-finite delta_h rejected; handle divergences upstream")
        n = self.count + 1.0
        return EevpdAccumulator(
            self.dim,
            n,
            self.mean + (dh - self.mean) / n,
            self.mean_sq + (dh * dh - self.mean_sq) / n,
        )

    def update_masked(self, delta_h, keep) -> "EevpdAccumulator":
        """Vectorized update skipping masked-out (divergent) entries."""
        dh = np.where(keep, delta_h, 0.0)
        n = self.count + keep
        safe = np.where(n > 0, n, 1.0)
        mean = np.where(keep, self.mean + (dh - self.mean) / safe, self.mean)
        mean_sq = np.where(keep, self.mean_sq + (dh * dh - self.mean_sq) / safe, self.mean_sq)
        return EevpdAccumulator(self.dim, n, mean, mean_sq)

    def merge(self, other: "EevpdAccumulator") -> "EevpdAccumulator":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        n = self.count + other.count
        safe = np.where(np.asarray(n) > 0, n, 1.0)
        w = other.count / safe
        return EevpdAccumulator(
            self.dim,
            n,
            self.mean + (other.mean - self.mean) * w,
            self.mean_sq + (other.mean_sq - self.mean_sq) * w,
        )

    def pooled(self) -> "EevpdAccumulator":
        """Collapse per-chain slots into one scalar accumulator."""
        out = EevpdAccumulator(self.dim)
        cnt = np.atleast_1d(np.asarray(self.count, dtype=float))
        mean = np.broadcast_to(np.asarray(self.mean, dtype=float), cnt.shape)
        mean_sq = np.broadcast_to(np.asarray(self.mean_sq, dtype=float), cnt.shape)
        for i in range(cnt.size):
            out = out.merge(EevpdAccumulator(self.dim, cnt[i], mean[i], mean_sq[i]))
        return out

    def estimate(self) -> float | np.ndarray:
        """Var[dH]/d, clamped at zero."""
        var = np.maximum(self.mean_sq - self.mean**2, 0.0)
        return var / self.dim

    def second_moment_estimate(self) -> float | np.ndarray:
        """E[dH^2]/d (the controller's proxy; equals EEVPD at stationarity)."""
        return self.mean_sq / self.dim


def eevpd_update(acc: EevpdAccumulator, delta_h: float) -> EevpdAccumulator:
    """Stream one energy error into the accumulator (functional form)."""
    return acc.updated(delta_h)


class AdaptationError(RuntimeError):
    """Raised when adaptation cannot stabilize the chain."""


@dataclass
class AdapterState:
    """Controller state; ``eps`` and the accumulators may be per-chain arrays.

    ``sigma_xi`` is the log-normal trust width on the step-size prediction
    ratio (see module docstring): the weight applied to a predictor value
    xi at step size eps is ``weight(xi * eps**6, 6 * sigma_xi)``.
    """

    alpha: float
    eps: float | np.ndarray
    gamma: float = GAMMA_DEFAULT
    sigma_xi: float = SIGMA_XI_DEFAULT
    A: float | np.ndarray = 0.0
    B: float | np.ndarray = 0.0
    n_halvings: int | np.ndarray = 0
    max_halvings: int = MAX_HALVINGS_DEFAULT

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if np.any(np.asarray(self.eps) <= 0):
            raise ValueError("eps must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")

    def with_chains(self, n: int) -> "AdapterState":
        """Broadcast scalar state to n per-chain slots."""
        return replace(
            self,
            eps=np.full(n, float(np.asarray(self.eps))),
            A=np.full(n, float(np.asarray(self.A))),
            B=np.full(n, float(np.asarray(self.B))),
            n_halvings=np.zeros(n, dtype=int),
        )


def predictor_xi(delta_h, eps, alpha, d):
    """``xi = dH^2 / (d alpha eps^6)``; ``xi^{-1/6}`` predicts the optimal eps."""
    dh = np.asarray(delta_h, dtype=float)
    return dh * dh / (d * alpha * np.asarray(eps, dtype=float) ** 6)


def weight(xi, sigma_xi: float = SIGMA_XI_DEFAULT):
    """Log-normal penalty ``w = exp(-(log xi)^2 / (2 sigma_xi^2))``; w(0) = 0."""
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0):
        raise ValueError("xi must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        log_xi = np.log(xi)
        w = np.exp(-0.5 * log_xi * log_xi / sigma_xi**2)
    return np.where(xi == 0.0, 0.0, w)


def adapter_step(state: AdapterState, delta_h, d: int, divergent=None) -> AdapterState:
    """One controller update; divergent steps halve eps and skip the average.

    Scalar and per-chain array states are handled uniformly.
    """
    dh = np.asarray(delta_h, dtype=float)
    bad = ~np.isfinite(dh)
    if divergent is not None:
        bad = bad | np.asarray(divergent, dtype=bool)
    xi = predictor_xi(np.where(bad, 1.0, dh), state.eps, state.alpha, d)
    # penalty on the extrapolation |log(eps_hat / eps)| = |log(xi eps^6)| / 6
    w = weight(xi * np.asarray(state.eps, dtype=float) ** 6, 6.0 * state.sigma_xi)
    A = np.where(bad, state.A, state.gamma * state.A + xi * w)
    B = np.where(bad, state.B, state.gamma * state.B + w)
    with np.errstate(divide="ignore", invalid="ignore"):
        predicted = np.where(B > 0, (np.maximum(A, 0.0) / np.where(B > 0, B, 1.0)) ** (-1.0 / 6.0), state.eps)
    eps = np.where(bad, 0.5 * np.asarray(state.eps), predicted)
    halvings = state.n_halvings + bad
    out = replace(state, A=A, B=B, eps=eps, n_halvings=halvings)
    if np.ndim(dh) == 0:
        out.A, out.B = float(A), float(B)
        out.eps = float(eps)
        out.n_halvings = int(halvings)
    return out


@dataclass(frozen=True)
class BiasBudget:
    """RMSE tolerance split into a bias tolerance and an EEVPD target."""

    rmse_tolerance: float
    bias_tolerance: float
    eevpd_target: float

    def __post_init__(self):
        if self.bias_tolerance**2 > self.rmse_tolerance**2 * (1 + 1e-12):
            raise ValueError("bias tolerance cannot exceed the RMSE tolerance")


def budget_from_rmse(rmse_tol: float) -> BiasBudget:
    """Bias tolerance rmse/sqrt(5), EEVPD target phi(bias^2).

    The 1/5 split is the optimum of the bias-variance tradeoff for second
    moments of a Gaussian under unadjusted Verlet dynamics.
    """
    if not 0.0 < rmse_tol < 1.0:
        raise ValueError("rmse tolerance must be in (0, 1)")
    bias = rmse_tol / np.sqrt(5.0)
    return BiasBudget(rmse_tol, float(bias), phi(bias * bias))


def budget_from_bias(bias_tol: float) -> BiasBudget:
    """Budget implied by a covariance-bias tolerance (rmse = bias * sqrt(5))."""
    if not 0.0 < bias_tol < 1.0:
        raise ValueError("bias tolerance must be in (0, 1)")
    return BiasBudget(float(bias_tol * np.sqrt(5.0)), float(bias_tol), phi(bias_tol**2))


def budget_from_eevpd(eevpd_target: float) -> BiasBudget:
    """Budget implied by a raw EEVPD target (bias = sqrt(phi_inv(eevpd)))."""
    if eevpd_target <= 0:
        raise ValueError("eevpd target must be positive")
    bias = float(np.sqrt(phi_inv(eevpd_target)))
    return BiasBudget(float(bias * np.sqrt(5.0)), bias, float(eevpd_target))


def default_init_eps(dim: int, mean_scale: float = 1.0) -> float:
    """Warm-start step size: 0.5 d^{-1/4} times the mean coordinate scale."""
    return 0.5 * dim ** (-0.25) * mean_scale


def default_decoherence_length(dim: int, mean_scale: float = 1.0) -> float:
    """Default momentum decoherence length: sqrt(d) times the coordinate scale."""
    return float(np.sqrt(dim) * mean_scale)


@dataclass
class AdaptationResult:
    """Tuned step size, warm-started chain state, and per-step traces.

    ``eps`` is the median of the trailing quarter of the step-size trace:
    the controller's pooled prediction still jitters with the chi-squared
    scatter of per-step energy errors, and the tail median is a lower
    variance estimate of the converged value than the raw endpoint
    (``eps_trace[-1]``).
    """

    eps: float
    state: object  # PhaseState
    eps_trace: np.ndarray
    dh_sq_per_dim_trace: np.ndarray
    n_divergent: int
    eevpd: EevpdAccumulator = field(repr=False, default=None)

    def measured_eevpd(self, tail_fraction: float = 0.25) -> float:
        """Mean dH^2/d over the trailing fraction of the adaptation run."""
        tail = self.dh_sq_per_dim_trace[int(len(self.dh_sq_per_dim_trace) * (1 - tail_fraction)) :]
        tail = tail[np.isfinite(tail)]
        return float(tail.mean())


def run_adaptation(
    target,
    sampler_kind: str,
    alpha: float,
    init_eps: float | None = None,
    n_steps: int = 2000,
    *,
    L: float | None = None,
    seed: int = 0,
    chain_id: int = 0,
    x0=None,
    sigma_xi: float = SIGMA_XI_DEFAULT,
    gamma: float = GAMMA_DEFAULT,
    max_halvings: int = MAX_HALVINGS_DEFAULT,
) -> AdaptationResult:
    """Run one unadjusted chain with the live controller for ``n_steps``.

    Returns the tuned step size plus the final chain state, so sampling can
    warm-start from the adaptation run (the tuning steps double as
    burn-in).  Aborts with ``AdaptationError`` after more than
    ``max_halvings`` divergence halvings.
    """
    from .samplers import UnadjustedRunner  # local import to avoid a cycle

    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if sampler_kind not in ("uhmc", "ulmc"):
        raise ValueError("adaptation applies to unadjusted kinds only")
    if init_eps is None:
        init_eps = default_init_eps(target.dim)
    if L is None:
        L = default_decoherence_length(target.dim)
    adapter = AdapterState(
        alpha=alpha, eps=init_eps, gamma=gamma, sigma_xi=sigma_xi, max_halvings=max_halvings
    )
    runner = UnadjustedRunner(
        target,
        sampler_kind,
        n_chains=1,
        eps=init_eps,
        L=L,
        seed=seed,
        first_chain_id=chain_id,
        adapter=adapter,
        init="standard-normal" if x0 is None else np.asarray(x0, dtype=float)[None, :],
    )
    eps_trace = np.empty(n_steps)
    dh_trace = np.empty(n_steps)
    for i in range(n_steps):
        step = runner.step()
        eps_trace[i] = runner.eps_per_chain()[0]
        dh = step.delta_h[0]
        dh_trace[i] = dh * dh / target.dim if np.isfinite(dh) else np.nan
        if runner.adapter.n_halvings[0] > max_halvings:
            raise AdaptationError(
                f"adaptation aborted: step size halved {int(runner.adapter.n_halvings[0])} "
                f"times (persistent divergence at alpha={alpha:g}); "
                f"last eps={eps_trace[i]:.3e}"
            )
    tail = eps_trace[int(0.75 * n_steps) :]
    return AdaptationResult(
        eps=float(np.median(tail)),
        state=runner.single_chain_state(),
        eps_trace=eps_trace,
        dh_sq_per_dim_trace=dh_trace,
        n_divergent=int(runner.divergent_steps[0]),
        eevpd=runner.eevpd.pooled(),
    )
