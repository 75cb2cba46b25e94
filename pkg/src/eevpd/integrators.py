"""Symplectic one-step maps with exact energy-error accounting.

Velocity Verlet splits the Hamiltonian flow into half velocity kicks around
a full position drift; the Langevin step wraps it in two half
Ornstein-Uhlenbeck momentum refreshes (the OBABO composition).  Each step
reports the energy change of the Verlet part only: the refreshes resample
the exact Gaussian momentum marginal and contribute no discretization
error.

States are batched: ``x, u`` of shape ``(..., d)``, step sizes scalar or
per-chain ``(...,)``.  One Verlet step consumes exactly one gradient
evaluation; the trailing half kick of a step and the leading half kick of
the next share the cached gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "DEFAULT_DIVERGENCE_THRESHOLD",
    "PhaseState",
    "StepOutcome",
    "IntegratorConfig",
    "prepare",
    "energy",
    "verlet_step",
    "ou_refresh",
    "lmc_step",
]

DEFAULT_DIVERGENCE_THRESHOLD = 1000.0


@dataclass
class PhaseState:
    """Position/momentum pair with cached gradient and density value."""

    x: np.ndarray
    u: np.ndarray
    grad_cache: np.ndarray | None = None
    nld_cache: np.ndarray | float | None = None

    def copy(self) -> "PhaseState":
        return PhaseState(
            self.x.copy(),
            self.u.copy(),
            None if self.grad_cache is None else self.grad_cache.copy(),
            None if self.nld_cache is None else np.copy(self.nld_cache),
        )


@dataclass
class StepOutcome:
    """Result of one integrator step."""

    state: PhaseState
    delta_h: np.ndarray | float
    grad_calls: int
    divergent: np.ndarray | bool


@dataclass
class IntegratorConfig:
    """Step size, momentum decoherence length, optional diagonal scales."""

    step_size: float
    refresh_scale: float = np.inf
    preconditioner: np.ndarray | None = None

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.refresh_scale <= 0:
            raise ValueError("refresh_scale must be positive")
        if self.preconditioner is not None and np.any(np.asarray(self.preconditioner) <= 0):
            raise ValueError("preconditioner entries must be positive")


def _col(eps) -> np.ndarray | float:
    """Broadcast a per-chain scalar against (..., d) arrays."""
    if np.ndim(eps) == 0:
        return eps
    return np.asarray(eps)[..., None]


def prepare(state: PhaseState, target) -> tuple[PhaseState, int]:
    """Populate gradient/density caches; costs one gradient evaluation."""
    nld, g = target.nld_and_grad(state.x)
    return replace(state, grad_cache=g, nld_cache=nld), 1


def energy(state: PhaseState, target) -> np.ndarray | float:
    """H(z) = ||u||^2 / 2 + L(x)."""
    return 0.5 * np.sum(state.u * state.u, axis=-1) + target.neg_log_density(state.x)


def verlet_step(
    state: PhaseState,
    target,
    eps,
    divergence_threshold: float = DEFAULT_DIVERGENCE_THRESHOLD,
) -> StepOutcome:
    """One velocity Verlet step: half kick, drift, half kick.

    Requires prepared caches (see ``prepare``).  ``delta_h`` is the exact
    energy change of the step; ``divergent`` flags non-finite values or
    |delta_h| beyond the threshold, leaving policy to the caller.
    """
    if state.grad_cache is None or state.nld_cache is None:
        raise ValueError("state caches not populated; call prepare() first")
    eps_c = _col(eps)
    with np.errstate(over="ignore", invalid="ignore"):
        u_half = state.u - (0.5 * eps_c) * state.grad_cache
        x_new = state.x + eps_c * u_half
        nld_new, grad_new = target.nld_and_grad(x_new)
        u_new = u_half - (0.5 * eps_c) * grad_new
        delta_h = (
            0.5 * (np.sum(u_new * u_new, axis=-1) - np.sum(state.u * state.u, axis=-1))
            + nld_new
            - state.nld_cache
        )
        divergent = ~np.isfinite(delta_h) | (np.abs(delta_h) > divergence_threshold)
    new_state = PhaseState(x_new, u_new, grad_new, nld_new)
    return StepOutcome(new_state, delta_h, 1, divergent)


def ou_refresh(state: PhaseState, eps, L, noise: np.ndarray) -> PhaseState:
    """Partial momentum refresh: u' = e^{-eps/L} u + sqrt(1 - e^{-2 eps/L}) n.

    Position and caches are untouched.  L = inf leaves u unchanged; the
    eps/L -> inf limit replaces u by the noise.
    """
    c = np.exp(-_col(eps) / L)
    u_new = c * state.u + np.sqrt(1.0 - c * c) * noise
    return replace(state, u=u_new)


def lmc_step(
    state: PhaseState,
    target,
    eps,
    L,
    noise_pair: tuple[np.ndarray, np.ndarray],
    divergence_threshold: float = DEFAULT_DIVERGENCE_THRESHOLD,
) -> StepOutcome:
    """One OBABO Langevin step: half refresh, Verlet step, half refresh.

    ``delta_h`` covers the Verlet sub-step only.
    """
    half = 0.5 * np.asarray(eps) if np.ndim(eps) else 0.5 * eps
    state = ou_refresh(state, half, L, noise_pair[0])
    out = verlet_step(state, target, eps, divergence_threshold)
    out.state = ou_refresh(out.state, half, L, noise_pair[1])
    return out
