"""Command line interface: ``bench <subcommand>``.

Subcommands: ``bias-curve``, ``scaling``, ``table``, ``adapt-trace``,
``oracle``.  A JSON config file can set any flag (keys use underscores);
explicit flags override the file.  Exit codes: 0 success, 2 censored or
incomplete results, 1 error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with defaults for any flag")
    p.add_argument("--model", default="gauss-std")
    p.add_argument("--sampler", action="append", dest="samplers", metavar="KIND",
                   help="sampler kind (repeatable): uhmc|ulmc|ahmc|almc")
    p.add_argument("--chains", type=int, default=128)
    p.add_argument("--budget", type=int, default=100_000,
                   help="gradient calls per chain")
    p.add_argument("--eps-grid", default=None,
                   help="step sizes: 'a,b,c' or 'lo:hi:n' or 'lo:hi:nlog'")
    p.add_argument("--eevpd", type=float, default=None, help="EEVPD target")
    p.add_argument("--rmse-tol", type=float, default=None,
                   help="relative RMSE tolerance (implies bias tol and EEVPD)")
    p.add_argument("--bias-tol", type=float, default=None,
                   help="covariance bias tolerance (implies RMSE tol and EEVPD)")
    p.add_argument("--adapt-steps", type=int, default=2000)
    p.add_argument("--sigma-xi", type=float, default=1.5)
    p.add_argument("--forget-n", type=int, default=50,
                   help="forgetting horizon n; gamma = (n-1)/(n+1)")
    p.add_argument("--decoherence-length", "-L", type=float, default=None, dest="L")
    p.add_argument("--acceptance", type=float, default=0.8,
                   help="target acceptance rate for adjusted samplers")
    p.add_argument("--precondition", action="store_true",
                   help="rescale coordinates by ground-truth stddevs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--deterministic", action="store_true",
                   help="suppress the timestamp header for byte-identical reruns")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Sampler benchmarking: bias curves, scaling, cost tables, traces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bias-curve", help="asymptotic b2_cov vs measured EEVPD")
    _add_common(p)

    p = sub.add_parser("scaling", help="gradient cost vs dimension on product targets")
    _add_common(p)
    p.add_argument("--block", default="gauss-std:d=1", help="block model id")
    p.add_argument("--k-list", default="16,32,64,128,256,512,1024",
                   help="comma list of copy counts")

    p = sub.add_parser("table", help="median-curve grads to b2_avg threshold")
    _add_common(p)
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--resamples", type=int, default=100, help="bootstrap resamples")

    p = sub.add_parser("adapt-trace", help="per-step adaptation trace")
    _add_common(p)
    p.add_argument("--alpha", type=float, default=None,
                   help="EEVPD target (overrides --eevpd/--rmse-tol for the trace)")
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--init-eps", type=float, default=None)

    p = sub.add_parser("oracle", help="closed-form EEVPD/bias/W2 table for a spectrum")
    _add_common(p)
    p.add_argument("--spectrum", default="iso:100",
                   help="'iso:<d>', 'loglin:<min>,<max>,<d>', or value list")

    return parser


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser, argv):
    if not args.config:
        return args
    overrides = json.loads(Path(args.config).read_text())
    explicit = {a.lstrip("-").replace("-", "_").split("=")[0] for a in argv if a.startswith("--")}
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            parser.error(f"unknown config key {key!r}")
        if attr in explicit:
            continue  # flags override the file
        setattr(args, attr, value)
    return args


def _samplers(args, default=("ulmc",)):
    if not args.samplers:
        return tuple(default)
    out = []
    for item in args.samplers:
        out.extend(k.strip() for k in str(item).split(",") if k.strip())
    return tuple(out)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args = _apply_config_file(args, parser, argv)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    try:
        return _dispatch(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    det = bool(args.deterministic)
    if args.command == "bias-curve":
        if not args.eps_grid:
            raise ValueError("bias-curve requires --eps-grid")
        rows, summary = bench.run_bias_curve(
            args.model,
            _samplers(args)[0],
            bench.parse_grid(args.eps_grid),
            args.budget,
            n_chains=max(2, args.chains),
            seed=args.seed,
            L=args.L,
            threads=args.threads,
            out=args.out,
            deterministic=det,
        )
        if args.out is None:
            print(bench.write_csv(None, bench.BIAS_CURVE_COLUMNS, rows, det), end="")
        return 2 if any(not point["converged"] for point in summary) else 0

    if args.command == "scaling":
        k_list = [int(k) for k in str(args.k_list).split(",")]
        rows = bench.run_scaling(
            args.block,
            k_list,
            _samplers(args, default=("ulmc", "almc")),
            args.rmse_tol if args.rmse_tol is not None else 0.1,
            chains=args.chains,
            budget=args.budget,
            seed=args.seed,
            acceptance=args.acceptance,
            L=args.L,
            adapt_steps=args.adapt_steps,
            threads=args.threads,
            out=args.out,
            deterministic=det,
        )
        if args.out is None:
            print(bench.write_csv(None, bench.SCALING_COLUMNS, rows, det), end="")
        censored_col = bench.SCALING_COLUMNS.index("censored")
        return 2 if any(row[censored_col] for row in rows) else 0

    if args.command == "table":
        result = bench.run_grads_to_threshold(
            args.model,
            _samplers(args, default=("ulmc", "almc")),
            args.threshold,
            args.budget,
            chains=args.chains,
            seed=args.seed,
            rmse_tol=args.rmse_tol if args.rmse_tol is not None else 0.1,
            acceptance=args.acceptance,
            L=args.L,
            adapt_steps=args.adapt_steps,
            apply_preconditioning=args.precondition,
            resamples=args.resamples,
            threads=args.threads,
            out=args.out,
            deterministic=det,
        )
        if args.out is None:
            print(result.to_json())
        return 2 if any(result.censored.values()) else 0

    if args.command == "adapt-trace":
        alpha = args.alpha
        if alpha is None:
            spec = bench.ExperimentSpec(
                command="adapt-trace", rmse_tol=args.rmse_tol,
                bias_tol=args.bias_tol, eevpd=args.eevpd, chains=2, budget=1,
            )
            alpha = spec.bias_budget().eevpd_target
        rows, _ = bench.run_adaptation_trace(
            args.model,
            _samplers(args)[0],
            alpha,
            args.steps,
            seed=args.seed,
            L=args.L,
            init_eps=args.init_eps,
            out=args.out,
            deterministic=det,
        )
        if args.out is None:
            print(bench.write_csv(None, bench.TRACE_COLUMNS, rows, det), end="")
        return 0

    if args.command == "oracle":
        spectrum = bench.parse_spectrum(args.spectrum)
        grid = bench.parse_grid(args.eps_grid) if args.eps_grid else (
            bench.parse_grid(f"0.01:{0.99 * spectrum.max_stable_eps():.6g}:24log")
        )
        rows = bench.oracle_table(spectrum, grid, out=args.out, deterministic=det)
        if args.out is None:
            print(bench.write_csv(None, bench.ORACLE_COLUMNS, rows, det), end="")
        return 0

    raise ValueError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
