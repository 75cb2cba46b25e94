"""Experiment drivers: bias curves, scaling study, cost tables, traces.

Each runner produces plain CSV/JSON artifacts (no plotting).  Rows carry
the seed, chain id, and a config hash sufficient to replay a single chain;
reruns with identical seeds are byte-identical except for an optional
header timestamp, which ``deterministic=True`` suppresses.

Chains are split across a thread pool when ``threads > 1``; results are
keyed by chain id and merged in order, so scheduling does not affect
output.
"""

from __future__ import annotations

import hashlib
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapt import budget_from_rmse, run_adaptation
from .gauss import (
    GaussSpectrum,
    PHI_VALUE_MAX,
    PHI_W_VALUE_MAX,
    b2_exact,
    covariance_bound_max_eps,
    eevpd_exact,
    phi_inv,
    phi_w_inv,
    wasserstein2_gauss,
    wasserstein_bound_max_eps,
)
from .metrics import (
    FULL_COV_DIM_LIMIT,
    b2_avg,
    b2_cov,
    bootstrap_error,
    first_crossing,
    median_curve,
)
from .samplers import ADJUSTED, run_ensemble, tune_acceptance
from .targets import parse_model, precondition

__all__ = [
    "ExperimentSpec",
    "BenchResult",
    "run_bias_curve",
    "run_scaling",
    "run_grads_to_threshold",
    "run_adaptation_trace",
    "oracle_table",
    "write_csv",
    "config_hash",
]


@dataclass
class ExperimentSpec:
    """Declarative description of one experiment invocation."""

    command: str
    model: str = "gauss-std"
    samplers: tuple = ("ulmc",)
    chains: int = 128
    budget: int = 100_000
    eps_grid: tuple = ()
    rmse_tol: float | None = None
    bias_tol: float | None = None
    eevpd: float | None = None
    threshold: float = 0.01
    k_list: tuple = ()
    acceptance: float = 0.8
    decoherence_length: float | None = None
    adapt_steps: int = 2000
    sigma_xi: float = 1.5
    forget_n: int = 50
    spectrum: str = ""
    precondition: bool = False
    seed: int = 0
    threads: int = 1
    out: str | None = None
    deterministic: bool = False

    def __post_init__(self):
        if self.chains < 2:
            raise ValueError("need at least 2 chains (bootstrap requires them)")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        exclusive = [v is not None for v in (self.rmse_tol, self.bias_tol, self.eevpd)]
        if sum(exclusive) > 1:
            raise ValueError("--rmse-tol, --bias-tol and --eevpd are mutually exclusive")

    def bias_budget(self):
        from .adapt import budget_from_bias, budget_from_eevpd

        if self.eevpd is not None:
            return budget_from_eevpd(self.eevpd)
        if self.bias_tol is not None:
            return budget_from_bias(self.bias_tol)
        return budget_from_rmse(self.rmse_tol if self.rmse_tol is not None else 0.1)


@dataclass
class BenchResult:
    """Grads-to-threshold summary for one model across samplers."""

    model: str
    threshold: float
    grads_to_threshold: dict = field(default_factory=dict)
    bootstrap_relative_error: dict = field(default_factory=dict)
    censored: dict = field(default_factory=dict)
    curve_grid: dict = field(default_factory=dict)
    median_curves: dict = field(default_factory=dict)
    eps: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "model": self.model,
            "threshold": self.threshold,
            "samplers": {
                kind: {
                    "grads_to_threshold": self.grads_to_threshold[kind],
                    "bootstrap_relative_error": self.bootstrap_relative_error[kind],
                    "censored": self.censored[kind],
                    "eps": self.eps[kind],
                }
                for kind in self.grads_to_threshold
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def config_hash(params: dict) -> str:
    """Short stable hash of a config mapping (for chain replay bookkeeping)."""
    blob = json.dumps(params, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_csv(path, columns, rows, deterministic: bool = True, comment: str | None = None):
    """Write rows (sequences) as CSV; floats via repr for byte stability."""
    buf = io.StringIO()
    if not deterministic:
        buf.write(f"# generated: {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
    if comment:
        buf.write(f"# {comment}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(_cell(v) for v in row) + "\n")
    text = buf.getvalue()
    if path is None:
        return text
    Path(path).write_text(text)
    return text


def _cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".10g")
    if isinstance(v, (np.floating,)):
        return format(float(v), ".10g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _split_chains(n_chains: int, threads: int):
    threads = max(1, min(threads, n_chains))
    base, extra = divmod(n_chains, threads)
    sizes = [base + (1 if t < extra else 0) for t in range(threads)]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return [(int(o), int(s)) for o, s in zip(offsets, sizes) if s > 0]


def _run_groups(threads: int, jobs):
    """Run callables (keyed by offset) in a pool; return results in key order."""
    if threads <= 1 or len(jobs) == 1:
        return [job() for _, job in sorted(jobs.items())]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {off: pool.submit(job) for off, job in jobs.items()}
        return [futures[off].result() for off in sorted(futures)]


def run_ensemble_split(target, kind, *, n_chains, threads=1, seed=0, **kw):
    """run_ensemble split over a thread pool; merge is keyed by chain id."""
    groups = _split_chains(n_chains, threads)
    if len(groups) == 1:
        return [run_ensemble(target, kind, n_chains=n_chains, seed=seed, **kw)]
    jobs = {
        off: (lambda off=off, size=size: run_ensemble(
            target, kind, n_chains=size, seed=seed, first_chain_id=off, **kw
        ))
        for off, size in groups
    }
    return _run_groups(threads, jobs)


def _concat_results_curves(results):
    grid = results[0].curve_grid
    for r in results[1:]:
        if not np.array_equal(r.curve_grid, grid):
            raise RuntimeError("chain groups produced misaligned curve grids")
    return grid, np.vstack([r.curves for r in results])


BIAS_CURVE_COLUMNS = [
    "model", "sampler", "eps", "L", "eevpd_target", "grad_calls", "b2_cov", "b2_avg",
    "divergent_fraction", "chain_id", "seed", "eevpd_measured", "converged", "config",
]


def run_bias_curve(
    model: str,
    sampler: str = "ulmc",
    eps_grid=(),
    budget: int = 1_000_000,
    *,
    n_chains: int = 4,
    seed: int = 0,
    L: float | None = None,
    discard_fraction: float = 0.1,
    threads: int = 1,
    out=None,
    deterministic: bool = True,
):
    """Asymptotic covariance error vs measured EEVPD for an unadjusted kind.

    For each step size: run ``n_chains`` chains of ``budget`` gradient calls
    each, discard the initial segment, estimate the stationary covariance,
    and report (measured EEVPD, b2_cov).  Points whose error is still
    decaying (last-quarter vs last-half estimates differ by more than 20%)
    are flagged as unconverged.  Returns (per-chain rows, per-eps summary).
    """
    if sampler in ADJUSTED:
        raise ValueError("bias curves apply to unadjusted samplers")
    target = parse_model(model)
    truth = target.truth
    if truth is None:
        raise ValueError("bias curves require a model with ground truth")
    d = target.dim
    full = d <= FULL_COV_DIM_LIMIT and truth.cov is not None
    eps_grid = tuple(float(e) for e in eps_grid)
    if not eps_grid:
        raise ValueError("eps grid must not be empty")
    if L is None:
        from .adapt import default_decoherence_length

        L = default_decoherence_length(d)
    burn = int(discard_fraction * budget)
    base_cfg = {
        "command": "bias-curve", "model": model, "sampler": sampler, "budget": budget,
        "L": L, "seed": seed, "burn_in": burn,
    }

    jobs = {}
    for i, eps in enumerate(eps_grid):
        off = i * n_chains

        def job(eps=eps, off=off):
            return run_ensemble(
                target, sampler, n_chains=n_chains, total_steps=budget, eps=eps,
                L=L, seed=seed, first_chain_id=off, burn_in=burn,
                full_cov=full, n_segments=4,
            )

        jobs[off] = job
    results = _run_groups(threads, jobs)

    rows, summary = [], []
    for i_eps, (eps, res) in enumerate(zip(eps_grid, results)):
        cfg = config_hash({**base_cfg, "eps": eps})
        eevpd_meas = float(res.eevpd.pooled().estimate())
        mom = res.moments_full if full else res.moments
        pooled_cov = mom.pooled().covariance()
        truth_cov = truth.cov if full else truth.var
        b2_pooled = b2_cov(truth_cov, pooled_cov)
        # convergence: compare the error of the last-half vs last-quarter
        halves = res.segment_moments
        last_half = halves[2].merge(halves[3]) if halves else None
        b2_last_half = b2_cov(truth.var, last_half.pooled().variance()) if halves else np.nan
        b2_last_quarter = (
            b2_cov(truth.var, res.segment_moments[3].pooled().variance()) if halves else np.nan
        )
        denom = max(abs(b2_last_half), 1e-300)
        converged = bool(abs(b2_last_quarter - b2_last_half) / denom < 0.20)
        for c in range(res.n_chains):
            chain_cov = mom.covariance()[c]
            rows.append([
                model, sampler, eps, L, "",
                int(res.grad_calls[c]),
                b2_cov(truth_cov, chain_cov),
                float(b2_avg(truth, res.moments.second_moment()[c])),
                res.divergent_fraction, c + i_eps * n_chains, seed,
                eevpd_meas, converged, cfg,
            ])
        summary.append({
            "eps": eps,
            "eevpd_measured": eevpd_meas,
            "b2_cov": b2_pooled,
            "b2_bound": phi_inv(eevpd_meas) if 0 <= eevpd_meas < PHI_VALUE_MAX else float("nan"),
            "converged": converged,
            "divergent_fraction": res.divergent_fraction,
        })
    if out is not None:
        write_csv(Path(out) / "bias_curve.csv", BIAS_CURVE_COLUMNS, rows, deterministic)
        (Path(out) / "bias_curve_summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True, default=float)
        )
    return rows, summary


SCALING_COLUMNS = [
    "model", "sampler", "K", "d", "eps", "L", "grads_to_tol", "censored",
    "rel_rmse_final", "seed", "config",
]


def run_scaling(
    block: str,
    k_list,
    samplers=("ulmc", "almc"),
    rmse_tol: float = 0.1,
    *,
    chains: int = 128,
    budget: int = 40_000,
    seed: int = 0,
    acceptance: float = 0.8,
    L: float | None = None,
    adapt_steps: int = 2000,
    threads: int = 1,
    out=None,
    deterministic: bool = True,
):
    """Gradient cost to reach a relative RMSE on E[x_1^2], vs dimension.

    The target is a product of ``K`` independent copies of ``block``; the
    tracked function is the first coordinate's second moment.  Adjusted
    samplers are tuned to a fixed acceptance rate, unadjusted ones to the
    EEVPD implied by the RMSE tolerance; the decoherence length is the
    block's own scale (constant in K).  The RMSE at a checkpoint is the
    root mean square over chains of the running-mean error.
    """
    block_model = parse_model(block)
    if block_model.truth is None:
        raise ValueError("scaling requires a block with ground truth")
    f_truth = float(block_model.truth.second_moment[0])
    if L is None:
        L = 2.0 * float(np.sqrt(block_model.dim))
    budget_spec = budget_from_rmse(rmse_tol)
    rows = []
    for K in k_list:
        K = int(K)
        model_id = f"product({block},{K})"
        target = parse_model(model_id)
        d = target.dim
        for sampler in samplers:
            cfg = config_hash({
                "command": "scaling", "block": block, "K": K, "sampler": sampler,
                "rmse_tol": rmse_tol, "seed": seed, "budget": budget, "L": L,
            })
            if sampler in ADJUSTED:
                tune = tune_acceptance(
                    target, sampler, acceptance, L=L, n_chains=16, seed=seed + 7 * K
                )
                eps = tune.eps
            else:
                adapted = run_adaptation(
                    target, sampler, budget_spec.eevpd_target, n_steps=adapt_steps,
                    L=L, seed=seed + 7 * K,
                )
                eps = adapted.eps
            results = run_ensemble_split(
                target, sampler, n_chains=chains, threads=threads, seed=seed,
                total_steps=budget, eps=eps, L=L, burn_in=min(1000, budget // 10),
                curve="mean_sq_first", curve_points=256,
            )
            grid, curves = _concat_results_curves(results)
            err = (curves - f_truth) / f_truth
            rel_rmse = np.sqrt(np.mean(err * err, axis=0))
            grads = first_crossing(grid, rel_rmse, rmse_tol)
            censored = bool(np.isnan(grads))
            rows.append([
                model_id, sampler, K, d, eps, L,
                float(grid[-1]) if censored else grads, censored,
                float(rel_rmse[-1]), seed, cfg,
            ])
    if out is not None:
        write_csv(Path(out) / "scaling.csv", SCALING_COLUMNS, rows, deterministic)
    return rows


TABLE_COLUMNS = [
    "model", "sampler", "eps", "L", "eevpd_target", "grads_to_threshold",
    "bootstrap_rel_error", "censored", "threshold", "chains", "seed", "config",
]


def run_grads_to_threshold(
    model: str,
    samplers=("ulmc", "almc"),
    threshold: float = 0.01,
    budget: int = 20_000,
    *,
    chains: int = 128,
    seed: int = 0,
    rmse_tol: float = 0.1,
    acceptance: float = 0.8,
    L: float | None = None,
    adapt_steps: int = 2000,
    apply_preconditioning: bool = False,
    resamples: int = 100,
    threads: int = 1,
    out=None,
    deterministic: bool = True,
) -> BenchResult:
    """Median-curve gradient cost to push b2_avg below a threshold.

    Every sampler sees the identical (optionally preconditioned) target and
    the same decoherence length; unadjusted step sizes come from the EEVPD
    budget, adjusted ones from acceptance tuning.  The crossing point of
    the median (across chains) error curve is bootstrapped for its spread.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    target = parse_model(model)
    if target.truth is None:
        raise ValueError("grads-to-threshold scoring requires ground truth")
    if apply_preconditioning:
        target = precondition(target)
    if L is None:
        L = float(np.sqrt(target.dim))
    budget_spec = budget_from_rmse(rmse_tol)
    result = BenchResult(model=model, threshold=threshold)
    rows = []
    for sampler in samplers:
        if sampler in ADJUSTED:
            tuned = tune_acceptance(target, sampler, acceptance, L=L, n_chains=16, seed=seed + 3)
            eps = tuned.eps
            eevpd_target = ""
        else:
            adapted = run_adaptation(
                target, sampler, budget_spec.eevpd_target, n_steps=adapt_steps, L=L, seed=seed + 3
            )
            eps = adapted.eps
            eevpd_target = budget_spec.eevpd_target
        group_results = run_ensemble_split(
            target, sampler, n_chains=chains, threads=threads, seed=seed,
            total_steps=budget, eps=eps, L=L, burn_in=min(1000, budget // 10),
            curve="b2_avg", curve_points=256,
        )
        grid, curves = _concat_results_curves(group_results)
        med = median_curve(curves)
        boot = bootstrap_error(curves, grid, threshold, resamples=resamples, seed=seed + 11)
        crossing = first_crossing(grid, med, threshold)
        censored = bool(np.isnan(crossing))
        value = float(grid[-1]) if censored else float(crossing)
        result.grads_to_threshold[sampler] = value
        result.bootstrap_relative_error[sampler] = boot.relative_error
        result.censored[sampler] = censored
        result.curve_grid[sampler] = grid
        result.median_curves[sampler] = med
        result.eps[sampler] = float(eps)
        rows.append([
            model, sampler, float(eps), L, eevpd_target, value,
            boot.relative_error, censored, threshold, chains, seed,
            config_hash({"command": "table", "model": model, "sampler": sampler,
                         "seed": seed, "budget": budget, "threshold": threshold}),
        ])
    if out is not None:
        write_csv(Path(out) / "table.csv", TABLE_COLUMNS, rows, deterministic)
        (Path(out) / "table.json").write_text(result.to_json())
    return result


TRACE_COLUMNS = ["step", "eps", "dh_sq_per_dim", "alpha"]


def run_adaptation_trace(
    model: str,
    sampler: str = "ulmc",
    alpha: float = 1e-3,
    steps: int = 10_000,
    *,
    seed: int = 0,
    L: float | None = None,
    init_eps: float | None = None,
    out=None,
    deterministic: bool = True,
):
    """Per-step (eps, dH^2/d) trace of one adaptation run plus the target line.

    If adaptation aborts on persistent divergence, the partial trace up to
    the abort is returned (halvings stay visible in the eps column).
    """
    from .adapt import AdaptationError

    target = parse_model(model)
    try:
        res = run_adaptation(
            target, sampler, alpha, init_eps=init_eps, n_steps=steps, L=L, seed=seed
        )
        eps_trace, dh_trace = res.eps_trace, res.dh_sq_per_dim_trace
        aborted = False
    except AdaptationError:
        # rerun with an uncapped halving budget to expose the halving trace
        res = run_adaptation(
            target, sampler, alpha, init_eps=init_eps, n_steps=steps, L=L, seed=seed,
            max_halvings=np.inf,
        )
        eps_trace, dh_trace = res.eps_trace, res.dh_sq_per_dim_trace
        aborted = True
    rows = [
        [i, float(eps_trace[i]), float(dh_trace[i]), alpha]
        for i in range(len(eps_trace))
    ]
    if out is not None:
        write_csv(
            Path(out) / "adapt_trace.csv", TRACE_COLUMNS, rows, deterministic,
            comment=f"model={model} sampler={sampler} aborted={aborted}",
        )
    return rows, res


ORACLE_COLUMNS = [
    "eps", "eevpd", "b2_exact", "b2_bound", "w2_exact_per_dim", "w2_bound_per_dim",
    "cov_bound_proven", "w_bound_proven",
]


def parse_spectrum(text: str) -> GaussSpectrum:
    """Spectrum spec: ``iso:<d>``, ``loglin:<min>,<max>,<d>``, or a value list."""
    text = text.strip()
    if text.startswith("iso:"):
        return GaussSpectrum(np.ones(int(text[4:])))
    if text.startswith("loglin:"):
        lo, hi, d = text[len("loglin:"):].split(",")
        return GaussSpectrum(np.geomspace(float(lo), float(hi), int(d)))
    return GaussSpectrum(np.array([float(v) for v in text.split(",")]))


def parse_grid(text: str):
    """Grid spec: ``lo:hi:n`` (linear), ``lo:hi:nlog`` (log) or a value list."""
    text = text.strip()
    if ":" in text:
        lo, hi, n = text.split(":")
        if n.endswith("log"):
            return np.geomspace(float(lo), float(hi), int(n[:-3]))
        return np.linspace(float(lo), float(hi), int(n))
    return np.array([float(v) for v in text.split(",")])


def oracle_table(spectrum: GaussSpectrum, eps_grid, out=None, deterministic: bool = True):
    """EEVPD / bias / Wasserstein closed forms over a step-size grid (CSV rows)."""
    rows = []
    eps_cov = covariance_bound_max_eps(spectrum)
    eps_w = wasserstein_bound_max_eps(spectrum)
    for eps in eps_grid:
        eps = float(eps)
        if not spectrum.is_stable(eps):
            rows.append([eps, "unstable", "", "", "", "", "", ""])
            continue
        v = eevpd_exact(spectrum, eps)
        b2 = b2_exact(spectrum, eps)
        w2 = wasserstein2_gauss(spectrum, eps) / spectrum.dim
        b2_bound = phi_inv(v) if v < PHI_VALUE_MAX else ""
        w2_bound = eps * eps * phi_w_inv(v) if v < PHI_W_VALUE_MAX else ""
        rows.append([
            eps, v, b2, b2_bound, w2, w2_bound, eps <= eps_cov, eps <= eps_w,
        ])
    if out is not None:
        write_csv(Path(out) / "oracle.csv", ORACLE_COLUMNS, rows, deterministic)
    return rows
