"""Markov chain kernels: unadjusted and adjusted HMC / LMC.

Four kinds share one integrator core:

- ``uhmc``: full momentum refresh every ``round(L/eps)`` Verlet steps, no
  accept/reject; every inner step's energy error feeds the EEVPD estimate.
- ``ulmc``: OBABO steps (partial refresh around each Verlet step).
- ``ahmc``: uhmc trajectories accepted with ``min(1, e^{-dH})`` where dH is
  the exact endpoint energy difference; rejection reverts the position.
- ``almc``: contiguous OBABO steps chopped into trajectories; the summed
  Verlet-only energy error enters the acceptance ratio and rejection
  restores the trajectory start with flipped momentum (the partial
  refreshes inside OBABO carry momentum decoherence across boundaries).

Chains are independent: each owns a counter-based random stream keyed by
``(seed, chain_id)``, so a chain's draw sequence does not depend on how
many chains run together, and reruns are bit-identical.  The runner
classes step ``n_chains`` at once on ``(n, d)`` arrays; the ``run_*``
generators are the single-chain views yielding per-step records.

Divergence policy (unadjusted): a step with non-finite or huge ``|dH|``
is discarded, momentum is resampled, the event is counted, and a live
adapter halves that chain's step size.  Adjusted kernels auto-reject
divergent trajectories.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .adapt import AdapterState, EevpdAccumulator, adapter_step, default_decoherence_length
from .integrators import (
    DEFAULT_DIVERGENCE_THRESHOLD,
    PhaseState,
    lmc_step,
    prepare,
    verlet_step,
)
from .metrics import RunningMoments, b2_avg
from .rng import INIT_STREAM, KERNEL_STREAM, spawn_generators

__all__ = [
    "KINDS",
    "ChainConfig",
    "StepRecord",
    "UnadjustedRunner",
    "AdjustedRunner",
    "run_uhmc",
    "run_ulmc",
    "run_ahmc",
    "run_almc",
    "run_ensemble",
    "RunResult",
    "tune_acceptance",
    "TuneResult",
]

KINDS = ("uhmc", "ulmc", "ahmc", "almc")
ADJUSTED = ("ahmc", "almc")


def steps_per_trajectory(L: float, eps: float) -> int:
    return max(1, int(round(L / eps)))


@dataclass
class ChainConfig:
    """Static description of one chain (or one chain family)."""

    kind: str
    step_size: float
    decoherence_length: float
    total_steps: int
    burn_in: int = 0
    seed: int = 0
    chain_id: int = 0
    steps_per_trajectory: int | None = None
    divergence_threshold: float = DEFAULT_DIVERGENCE_THRESHOLD

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.step_size <= 0 or self.decoherence_length <= 0:
            raise ValueError("step_size and decoherence_length must be positive")
        if not 0 <= self.burn_in < self.total_steps:
            raise ValueError("need total_steps > burn_in >= 0")
        if self.steps_per_trajectory is None and self.kind != "ulmc":
            self.steps_per_trajectory = steps_per_trajectory(
                self.decoherence_length, self.step_size
            )
        if self.steps_per_trajectory is not None and self.steps_per_trajectory < 1:
            raise ValueError("steps_per_trajectory must be >= 1")


@dataclass
class StepRecord:
    """One emitted step (unadjusted) or trajectory (adjusted)."""

    position: np.ndarray
    delta_h: float
    grad_calls_cumulative: int
    accepted: bool | None = None
    divergent: bool = False


@dataclass
class BatchStep:
    """Vectorized step outcome across the ensemble."""

    delta_h: np.ndarray
    divergent: np.ndarray
    accepted: np.ndarray | None = None


class _RunnerBase:
    def __init__(
        self,
        target,
        kind: str,
        n_chains: int,
        L: float,
        seed: int = 0,
        first_chain_id: int = 0,
        divergence_threshold: float = DEFAULT_DIVERGENCE_THRESHOLD,
        init="auto",
    ):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        self.target = target
        self.kind = kind
        self.n = int(n_chains)
        self.d = target.dim
        self.L = float(L)
        self.divergence_threshold = divergence_threshold
        ids = range(first_chain_id, first_chain_id + self.n)
        self.rngs = spawn_generators(seed, ids, stream=KERNEL_STREAM)
        init_rngs = spawn_generators(seed, ids, stream=INIT_STREAM)
        x = self._init_positions(init, init_rngs)
        u = np.stack([g.standard_normal(self.d) for g in init_rngs])
        state, calls = prepare(PhaseState(x, u), target)
        self.state = state
        self.grad_calls = np.full(self.n, calls, dtype=np.int64)
        self.divergent_steps = np.zeros(self.n, dtype=np.int64)
        self.steps_done = 0
        self._noise = np.empty((self.n, 2, self.d))

    def _init_positions(self, init, init_rngs) -> np.ndarray:
        if isinstance(init, np.ndarray):
            x = np.array(np.broadcast_to(init, (self.n, self.d)), dtype=float)
            return x
        if init == "auto":
            try:
                return np.stack([self.target.sample_exact(g, 1)[0] for g in init_rngs])
            except NotImplementedError:
                init = "standard-normal"
        if init == "standard-normal":
            return np.stack([g.standard_normal(self.d) for g in init_rngs])
        raise ValueError(f"unknown init {init!r}")

    def _fill_noise(self):
        buf = self._noise
        for c, g in enumerate(self.rngs):
            g.standard_normal(out=buf[c])
        return buf[:, 0, :], buf[:, 1, :]

    def _resample_momentum(self, mask: np.ndarray):
        u = self.state.u
        for c in np.nonzero(mask)[0]:
            u[c] = self.rngs[c].standard_normal(self.d)

    def positions(self) -> np.ndarray:
        return self.state.x

    def single_chain_state(self) -> PhaseState:
        """Copy of chain 0's phase state (for warm starts)."""
        s = self.state
        return PhaseState(
            s.x[0].copy(), s.u[0].copy(), s.grad_cache[0].copy(), np.copy(s.nld_cache[0])
        )


class UnadjustedRunner(_RunnerBase):
    """Vectorized uhmc/ulmc chains, optionally with a live step-size adapter."""

    def __init__(
        self,
        target,
        kind: str,
        n_chains: int = 1,
        eps: float = 0.1,
        L: float | None = None,
        seed: int = 0,
        first_chain_id: int = 0,
        steps_per_traj: int | None = None,
        divergence_threshold: float = DEFAULT_DIVERGENCE_THRESHOLD,
        adapter: AdapterState | None = None,
        init="auto",
    ):
        if kind not in ("uhmc", "ulmc"):
            raise ValueError("UnadjustedRunner handles 'uhmc' and 'ulmc'")
        if L is None:
            L = default_decoherence_length(target.dim)
        super().__init__(
            target, kind, n_chains, L, seed, first_chain_id, divergence_threshold, init
        )
        self.adapter = adapter.with_chains(self.n) if adapter is not None else None
        self.eps = float(eps)
        self._fixed_k = steps_per_traj
        self._traj_left = np.zeros(self.n, dtype=np.int64)  # 0 => refresh now
        self.eevpd = EevpdAccumulator(self.d, np.zeros(self.n), np.zeros(self.n), np.zeros(self.n))

    def eps_per_chain(self) -> np.ndarray:
        if self.adapter is not None:
            return np.asarray(self.adapter.eps)
        return np.full(self.n, self.eps)

    def reset_eevpd(self):
        self.eevpd = EevpdAccumulator(self.d, np.zeros(self.n), np.zeros(self.n), np.zeros(self.n))

    def _k_now(self) -> np.ndarray:
        if self._fixed_k is not None:
            return np.full(self.n, self._fixed_k, dtype=np.int64)
        eps = self.eps_per_chain()
        return np.maximum(1, np.rint(self.L / eps)).astype(np.int64)

    def step(self) -> BatchStep:
        eps = self.adapter.eps if self.adapter is not None else self.eps
        if self.kind == "uhmc":
            due = self._traj_left <= 0
            if due.any():
                self._resample_momentum(due)
                self._traj_left[due] = self._k_now()[due]
            out = verlet_step(self.state, self.target, eps, self.divergence_threshold)
            self._traj_left -= 1
        else:
            n1, n2 = self._fill_noise()
            out = lmc_step(self.state, self.target, eps, self.L, (n1, n2), self.divergence_threshold)
        div = np.atleast_1d(out.divergent)
        new = out.state
        if div.any():
            # discard the move, keep the last finite state, fresh momentum
            old = self.state
            new.x[div] = old.x[div]
            new.grad_cache[div] = old.grad_cache[div]
            new.nld_cache[div] = np.asarray(old.nld_cache)[div]
            self.state = new
            self._resample_momentum(div)
            if self.kind == "uhmc":
                self._traj_left[div] = 0
            self.divergent_steps += div
        else:
            self.state = new
        self.grad_calls += 1
        self.steps_done += 1
        dh = np.atleast_1d(out.delta_h)
        self.eevpd = self.eevpd.update_masked(dh, keep=~div & np.isfinite(dh))
        if self.adapter is not None:
            self.adapter = adapter_step(self.adapter, dh, self.d, divergent=div)
        return BatchStep(dh, div)


class AdjustedRunner(_RunnerBase):
    """Vectorized ahmc/almc chains with trajectory-level Metropolis."""

    def __init__(
        self,
        target,
        kind: str,
        n_chains: int = 1,
        eps: float = 0.1,
        L: float | None = None,
        seed: int = 0,
        first_chain_id: int = 0,
        steps_per_traj: int | None = None,
        divergence_threshold: float = DEFAULT_DIVERGENCE_THRESHOLD,
        init="auto",
    ):
        if kind not in ADJUSTED:
            raise ValueError("AdjustedRunner handles 'ahmc' and 'almc'")
        if L is None:
            L = default_decoherence_length(target.dim)
        super().__init__(
            target, kind, n_chains, L, seed, first_chain_id, divergence_threshold, init
        )
        self.set_eps(eps, steps_per_traj)
        self.n_trajectories = 0
        self.accepted_total = np.zeros(self.n)
        self.accept_prob_total = np.zeros(self.n)

    def set_eps(self, eps: float, steps_per_traj: int | None = None):
        self.eps = float(eps)
        self.k = steps_per_traj if steps_per_traj else steps_per_trajectory(self.L, self.eps)

    def acceptance_rate(self) -> np.ndarray:
        n = max(1, self.n_trajectories)
        return self.accepted_total / n

    def run_trajectory(self) -> BatchStep:
        st = self.state
        if self.kind == "ahmc":
            self._resample_momentum(np.ones(self.n, dtype=bool))
        x0 = st.x.copy()
        u0 = st.u.copy()
        g0 = st.grad_cache.copy()
        nld0 = np.array(st.nld_cache, dtype=float)
        h0 = 0.5 * np.sum(u0 * u0, axis=-1) + nld0
        dh_sum = np.zeros(self.n)
        div = np.zeros(self.n, dtype=bool)
        with np.errstate(invalid="ignore", over="ignore"):
            for _ in range(self.k):
                if self.kind == "almc":
                    n1, n2 = self._fill_noise()
                    out = lmc_step(
                        self.state, self.target, self.eps, self.L, (n1, n2),
                        self.divergence_threshold,
                    )
                else:
                    out = verlet_step(self.state, self.target, self.eps, self.divergence_threshold)
                self.state = out.state
                dh_sum += np.atleast_1d(out.delta_h)
                div |= np.atleast_1d(out.divergent)
                self.grad_calls += 1
                self.steps_done += 1
            if self.kind == "ahmc":
                st = self.state
                delta = (
                    0.5 * np.sum(st.u * st.u, axis=-1)
                    + np.asarray(st.nld_cache, dtype=float)
                    - h0
                )
            else:
                delta = dh_sum
            delta = np.where(div | ~np.isfinite(delta), np.inf, delta)
            p_acc = np.exp(np.minimum(0.0, -delta))
        unif = np.array([g.random() for g in self.rngs])
        accepted = unif < p_acc
        rej = ~accepted
        if rej.any():
            st = self.state
            st.x[rej] = x0[rej]
            st.grad_cache[rej] = g0[rej]
            st.nld_cache = np.asarray(st.nld_cache, dtype=float)
            st.nld_cache[rej] = nld0[rej]
            # almc keeps persistent momentum: flip on rejection
            st.u[rej] = -u0[rej] if self.kind == "almc" else u0[rej]
        self.divergent_steps += div
        self.n_trajectories += 1
        self.accepted_total += accepted
        self.accept_prob_total += p_acc
        return BatchStep(delta, div, accepted)


def _make_runner(target, config: ChainConfig, n_chains=1, adapter=None, init="auto"):
    common = dict(
        n_chains=n_chains,
        eps=config.step_size,
        L=config.decoherence_length,
        seed=config.seed,
        first_chain_id=config.chain_id,
        steps_per_traj=config.steps_per_trajectory,
        divergence_threshold=config.divergence_threshold,
        init=init,
    )
    if config.kind in ADJUSTED:
        return AdjustedRunner(target, config.kind, **common)
    return UnadjustedRunner(target, config.kind, adapter=adapter, **common)


def _unadjusted_stream(target, config: ChainConfig, kind: str, step_size_source=None):
    if config.kind != kind:
        raise ValueError(f"config.kind must be {kind!r}")
    adapter = step_size_source if isinstance(step_size_source, AdapterState) else None
    if adapter is None and step_size_source is not None:
        config = ChainConfig(**{**config.__dict__, "step_size": float(step_size_source),
                                "steps_per_trajectory": None})
    runner = _make_runner(target, config, adapter=adapter)
    for _ in range(config.total_steps):
        out = runner.step()
        yield StepRecord(
            position=runner.state.x[0].copy(),
            delta_h=float(out.delta_h[0]),
            grad_calls_cumulative=int(runner.grad_calls[0]),
            accepted=None,
            divergent=bool(out.divergent[0]),
        )


def run_uhmc(target, config: ChainConfig, step_size_source=None):
    """Unadjusted HMC chain: a stream of per-Verlet-step records.

    Momentum is freshly drawn every ``steps_per_trajectory`` steps; there is
    no accept/reject, so every post-step position is emitted (each is a
    draw from the chain's stationary law).  ``step_size_source`` is a fixed
    step size or a live ``AdapterState``.
    """
    return _unadjusted_stream(target, config, "uhmc", step_size_source)


def run_ulmc(target, config: ChainConfig, step_size_source=None):
    """Unadjusted Langevin chain (OBABO): per-step records, every position kept."""
    return _unadjusted_stream(target, config, "ulmc", step_size_source)


def _adjusted_stream(target, config: ChainConfig, kind: str):
    if config.kind != kind:
        raise ValueError(f"config.kind must be {kind!r}")
    runner = _make_runner(target, config)
    n_traj = config.total_steps // runner.k
    for _ in range(n_traj):
        out = runner.run_trajectory()
        yield StepRecord(
            position=runner.state.x[0].copy(),
            delta_h=float(out.delta_h[0]),
            grad_calls_cumulative=int(runner.grad_calls[0]),
            accepted=bool(out.accepted[0]),
            divergent=bool(out.divergent[0]),
        )


def run_ahmc(target, config: ChainConfig):
    """Adjusted HMC: one record per trajectory of ``round(L/eps)`` steps."""
    return _adjusted_stream(target, config, "ahmc")


def run_almc(target, config: ChainConfig):
    """Adjusted LMC (Langevin trajectories with momentum flip on rejection)."""
    return _adjusted_stream(target, config, "almc")


@dataclass
class RunResult:
    """Collected output of a vectorized multi-chain run."""

    kind: str
    n_chains: int
    total_steps: int
    eps: float | np.ndarray
    moments: RunningMoments
    eevpd: EevpdAccumulator | None
    grad_calls: np.ndarray
    divergent_steps: np.ndarray
    total_events: int = 0  # steps (unadjusted) or trajectories (adjusted) per chain
    moments_full: RunningMoments | None = None
    accept_rate: np.ndarray | None = None
    curve_grid: np.ndarray | None = None
    curves: np.ndarray | None = None
    segment_moments: list = field(default_factory=list, repr=False)

    @property
    def divergent_fraction(self) -> float:
        return float(self.divergent_steps.sum() / max(1, self.n_chains * self.total_events))


def _curve_values(curve, target, moments) -> np.ndarray:
    if callable(curve):
        return np.asarray(curve(moments), dtype=float)
    if curve == "b2_avg":
        return np.asarray(b2_avg(target.truth, moments), dtype=float)
    if curve == "mean_sq_first":
        return moments.second_moment()[..., 0]
    raise ValueError(f"unknown curve metric {curve!r}")


def run_ensemble(
    target,
    kind: str,
    *,
    n_chains: int,
    total_steps: int,
    eps: float,
    L: float | None = None,
    seed: int = 0,
    first_chain_id: int = 0,
    burn_in: int = 0,
    steps_per_traj: int | None = None,
    divergence_threshold: float = DEFAULT_DIVERGENCE_THRESHOLD,
    init="auto",
    full_cov: bool = False,
    n_segments: int = 1,
    curve: str | None = None,
    curve_points: int = 0,
    buffer_steps: int | None = None,
) -> RunResult:
    """Run ``n_chains`` independent chains and collect moment statistics.

    ``total_steps`` and ``burn_in`` count Verlet steps (gradient calls).
    Unadjusted kinds contribute every post-step position; adjusted kinds
    contribute trajectory endpoints.  With ``curve`` set, per-chain error
    curves are evaluated at ``curve_points`` checkpoints against the
    post-burn-in gradient count.  ``n_segments > 1`` additionally keeps
    per-segment accumulators (for convergence checks on curve tails).
    """
    if L is None:
        L = default_decoherence_length(target.dim)
    d = target.dim
    config = ChainConfig(
        kind=kind,
        step_size=eps,
        decoherence_length=L,
        total_steps=total_steps,
        burn_in=burn_in,
        seed=seed,
        chain_id=first_chain_id,
        steps_per_trajectory=steps_per_traj,
        divergence_threshold=divergence_threshold,
    )
    runner = _make_runner(target, config, n_chains=n_chains, init=init)
    moments = RunningMoments(d, shape=(n_chains,))
    moments_full = RunningMoments(d, shape=(n_chains,), full=True) if full_cov else None
    segments = [RunningMoments(d, shape=(n_chains,)) for _ in range(n_segments)] if n_segments > 1 else []
    if buffer_steps is None:
        buffer_steps = int(max(1, min(256, 8_000_000 // max(1, n_chains * d))))
    buffer = np.empty((buffer_steps, n_chains, d))
    fill = 0
    current_segment = 0
    collect_span = max(1, total_steps - burn_in)

    def flush():
        nonlocal fill
        if fill == 0:
            return
        block = buffer[:fill]
        moments.push_block(block)
        if moments_full is not None:
            moments_full.push_block(block)
        if segments:
            segments[current_segment].push_block(block)
        fill = 0

    def collect(step_index: int):
        nonlocal fill, current_segment
        if segments:
            seg = min(n_segments - 1, (step_index - burn_in) * n_segments // collect_span)
            if seg != current_segment:
                flush()
                current_segment = seg
        buffer[fill] = runner.positions()
        fill += 1
        if fill == buffer_steps:
            flush()

    curve_grid = []
    curve_rows = []
    next_checkpoint = None
    stride = 0
    if curve is not None:
        if curve_points < 1:
            raise ValueError("curve_points must be >= 1 when a curve is requested")
        stride = max(1, (total_steps - burn_in) // curve_points)
        next_checkpoint = burn_in + stride
    grads_at_collect_start = None

    def maybe_checkpoint():
        nonlocal next_checkpoint
        if next_checkpoint is None or runner.steps_done < next_checkpoint:
            return
        flush()
        curve_grid.append(int(runner.grad_calls[0] - grads_at_collect_start))
        curve_rows.append(_curve_values(curve, target, moments))
        next_checkpoint += stride

    total_events = 0
    if kind in ADJUSTED:
        while runner.steps_done < total_steps:
            grads_before = int(runner.grad_calls[0])
            runner.run_trajectory()
            total_events += 1
            if runner.steps_done > burn_in:
                if grads_at_collect_start is None:
                    grads_at_collect_start = grads_before
                collect(runner.steps_done - 1)
                maybe_checkpoint()
    else:
        runner.reset_eevpd()
        total_events = total_steps
        for s in range(total_steps):
            runner.step()
            if s == burn_in - 1:
                runner.reset_eevpd()
            if s >= burn_in:
                if grads_at_collect_start is None:
                    grads_at_collect_start = int(runner.grad_calls[0]) - 1
                collect(s)
                maybe_checkpoint()
    flush()
    return RunResult(
        kind=kind,
        n_chains=n_chains,
        total_steps=total_steps,
        eps=eps,
        moments=moments,
        eevpd=runner.eevpd if isinstance(runner, UnadjustedRunner) else None,
        grad_calls=runner.grad_calls.copy(),
        divergent_steps=runner.divergent_steps.copy(),
        total_events=total_events,
        moments_full=moments_full,
        accept_rate=runner.acceptance_rate() if kind in ADJUSTED else None,
        curve_grid=np.asarray(curve_grid, dtype=np.int64) if curve is not None else None,
        curves=np.asarray(curve_rows).T if curve is not None else None,
        segment_moments=segments,
    )


@dataclass
class TuneResult:
    """Outcome of acceptance-rate tuning."""

    eps: float
    acceptance: float
    converged: bool
    trajectories: int


def tune_acceptance(
    target,
    kind: str = "almc",
    target_rate: float = 0.8,
    *,
    L: float | None = None,
    eps0: float | None = None,
    n_chains: int = 16,
    seed: int = 0,
    batch: int = 10,
    window: int = 200,
    tol: float = 0.03,
    max_batches: int = 300,
    init="auto",
) -> TuneResult:
    """Stochastic-approximation tuning of the step size to an acceptance rate.

    Runs batches of trajectories across a small ensemble, nudging ``log eps``
    by the smoothed acceptance-probability error with a decaying gain, until
    the realized acceptance over the last ``window`` trajectories is within
    ``tol`` of the target.  If the cap is reached first, the best iterate is
    returned with ``converged=False`` (and a warning).
    """
    if not 0.0 < target_rate < 1.0:
        raise ValueError("target_rate must be in (0, 1)")
    if kind not in ADJUSTED:
        raise ValueError("acceptance tuning applies to adjusted kinds")
    if L is None:
        L = default_decoherence_length(target.dim)
    if eps0 is None:
        eps0 = 0.5 * target.dim ** (-0.25)
    runner = AdjustedRunner(
        target, kind, n_chains=n_chains, eps=eps0, L=L, seed=seed, init=init
    )
    log_eps = float(np.log(eps0))
    window_batches = max(1, int(np.ceil(window / (n_chains * batch))))
    recent_rates: list[float] = []
    best = (np.inf, eps0, 0.0)
    for b in range(max_batches):
        acc_prob = 0.0
        acc_rate = 0.0
        for _ in range(batch):
            out = runner.run_trajectory()
            acc_prob += float(np.mean(np.exp(np.minimum(0.0, -out.delta_h))))
            acc_rate += float(np.mean(out.accepted))
        acc_prob /= batch
        acc_rate /= batch
        recent_rates.append(acc_rate)
        if len(recent_rates) > window_batches:
            recent_rates.pop(0)
        window_rate = float(np.mean(recent_rates))
        if len(recent_rates) == window_batches and b >= 2:
            gap = abs(window_rate - target_rate)
            if gap < best[0]:
                best = (gap, float(np.exp(log_eps)), window_rate)
            if gap <= tol:
                return TuneResult(
                    eps=float(np.exp(log_eps)),
                    acceptance=window_rate,
                    converged=True,
                    trajectories=runner.n_trajectories * n_chains,
                )
        gain = 2.0 / (10.0 + b) ** 0.6
        log_eps += gain * (acc_prob - target_rate)
        log_eps = float(np.clip(log_eps, np.log(1e-6), np.log(1e6)))
        runner.set_eps(float(np.exp(log_eps)))
    warnings.warn(
        f"acceptance tuning did not converge within {max_batches} batches; "
        f"returning best iterate (acceptance {best[2]:.3f})",
        RuntimeWarning,
    )
    return TuneResult(
        eps=best[1],
        acceptance=best[2],
        converged=False,
        trajectories=runner.n_trajectories * n_chains,
    )
