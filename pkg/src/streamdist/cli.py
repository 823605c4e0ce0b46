"""Command-line entry point.

Subcommands:
  plan   capacity planning table over a mini-batch sweep
  run    execute one experiment config, write CSV (and optional figure)
  sweep  re-run a config over an axis (batch, mu, nodes, rounds, c)
  plot   render a figure from a previously written results CSV
  topo   inspect a topology: node/edge count and spectral quantities

Exit codes: 0 success; 1 runtime failure (reported with the failing trial);
2 planner found no feasible mini-batch; 64 usage error; 65 config error.
The default output directory comes from --outdir or STREAMDIST_OUTDIR.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import __version__
from . import harness as H
from . import rates as R
from .network import build_topology

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INFEASIBLE = 2
EXIT_USAGE = 64
EXIT_CONFIG = 65

_DEFAULT_BATCH_FACTORS = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000)


class _Parser(argparse.ArgumentParser):
    """argparse with the usage-error exit code of this tool's contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _outdir(args) -> Path:
    base = args.outdir or os.environ.get("STREAMDIST_OUTDIR", ".")
    return Path(base)


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise H.ConfigError(f"override {pair!r} must look like section.option=value")
        overrides[key.strip()] = value.strip()
    return overrides


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

def _plan_rates(args) -> tuple[float, float, float, int]:
    if args.config:
        config = H.parse_config(args.config)
        if config.rates is None:
            raise H.ConfigError("config has no [rates] section", args.config)
        return (config.rates["streaming"], config.rates["processing"],
                config.rates["messaging"], config.nodes)
    missing = [n for n in ("streaming", "processing", "messaging", "nodes")
               if getattr(args, n) is None]
    if missing:
        raise _UsageError(f"plan needs --{' --'.join(missing)} (or --config)")
    return args.streaming, args.processing, args.messaging, args.nodes


class _UsageError(Exception):
    pass


def cmd_plan(args) -> int:
    streaming, processing, messaging, nodes = _plan_rates(args)
    try:
        if args.batches:
            batches = [int(v) for v in args.batches.split(",")]
        else:
            batches = [nodes * f for f in _DEFAULT_BATCH_FACTORS]
        rounds = None if args.rounds in (None, "max") else int(args.rounds)
        template = R.SystemRates(streaming_rate=streaming, processing_rate=processing,
                                 messaging_rate=messaging, nodes=nodes,
                                 batch=batches[0], rounds=1)
        reports = R.rate_ratio_sweep(template, batches, rounds=rounds)
    except ValueError as exc:
        raise _UsageError(str(exc))
    header = f"{'B':>8} {'R_max':>6} {'R':>6} {'R_e':>12} {'Rs/Re':>12} {'mu':>8} {'rho':>10} feasible"
    print(header)
    for rep in reports:
        print(f"{rep.batch:>8} {rep.max_rounds:>6} {rep.rounds:>6} {rep.effective_rate:>12.4f} "
              f"{rep.stream_ratio:>12.4f} {rep.discarded:>8} {rep.mismatch:>10.6f} "
              f"{'yes' if rep.feasible else 'no'}")
    if args.csv:
        lines = ["B,R,R_e,Rs_over_Re,mu,rho,feasible"]
        for rep in reports:
            lines.append(",".join([
                str(rep.batch), str(rep.rounds), f"{rep.effective_rate:.17g}",
                f"{rep.stream_ratio:.17g}", str(rep.discarded),
                f"{rep.mismatch:.17g}", str(int(rep.feasible))]))
        H._atomic_write(Path(args.csv), "\n".join(lines) + "\n")
        print(f"wrote {args.csv}")
    return EXIT_OK if any(rep.feasible for rep in reports) else EXIT_INFEASIBLE


# ---------------------------------------------------------------------------
# run / sweep
# ---------------------------------------------------------------------------

def _emit(results: H.Results, args, stem: str | None = None) -> None:
    outdir = _outdir(args)
    stem = stem or results.experiment
    csv_path = Path(args.csv) if getattr(args, "csv", None) else outdir / f"{stem}.csv"
    H.emit_csv(results, csv_path)
    print(f"wrote {csv_path}")
    if getattr(args, "raw", None):
        H.emit_raw_csv(results, Path(args.raw))
        print(f"wrote {args.raw}")
    if getattr(args, "plot", False):
        spec = H.PlotSpec(metric=args.metric or None)
        svg_path = outdir / f"{stem}.svg"
        H.emit_plot(results, svg_path, spec)
        print(f"wrote {svg_path}")


def cmd_run(args) -> int:
    config = H.parse_config(args.config, _parse_overrides(args.set))
    results = H.run_experiment(config, workers=args.workers,
                               keep_raw=bool(args.raw))
    _emit(results, args, stem=config.output)
    return EXIT_OK


_SWEEP_AXES = ("batch", "mu", "nodes", "rounds", "c")


def cmd_sweep(args) -> int:
    if args.axis not in _SWEEP_AXES:
        raise _UsageError(f"--axis must be one of {_SWEEP_AXES}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise _UsageError("--values must list at least one value")
    base_overrides = _parse_overrides(args.set)
    base = H.parse_config(args.config, base_overrides)
    parts = []
    for value in values:
        overrides = dict(base_overrides)
        if args.axis == "nodes":
            overrides["experiment.nodes"] = value
        else:
            for spec in base.algorithms:
                overrides[f"algorithm.{spec.name}.{args.axis}"] = value
        config = H.parse_config(args.config, overrides)
        results = H.run_experiment(config, workers=args.workers,
                                   tag=f"[{args.axis}={value}]",
                                   keep_raw=bool(args.raw))
        parts.append(results)
    merged = H.merge_results(parts)
    _emit(merged, args, stem=f"{base.output}_{args.axis}_sweep")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot / topo
# ---------------------------------------------------------------------------

def cmd_plot(args) -> int:
    results = H.results_from_csv(args.results)
    spec = H.PlotSpec(metric=args.metric or None, x=args.x, title=args.title)
    out = Path(args.out) if args.out else Path(args.results).with_suffix(".svg")
    H.emit_plot(results, out, spec)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_topo(args) -> int:
    try:
        net = build_topology(args.kind, args.nodes, k=args.k, seed=args.seed,
                             weight_rule=args.weight_rule)
    except ValueError as exc:
        print(f"topo: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"N={net.nodes} edges={len(net.edges)} lambda2={net.lambda2:.12g} "
          f"spectral_gap={1.0 - net.lambda2:.12g}")
    if args.matrix_csv:
        lines = [",".join(f"{v:.17g}" for v in row) for row in net.weights]
        H._atomic_write(Path(args.matrix_csv), "\n".join(lines) + "\n")
        print(f"wrote {args.matrix_csv}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="streamdist",
                     description="Distributed streaming stochastic approximation simulator")
    parser.add_argument("--version", action="version", version=f"streamdist {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="capacity planning over a mini-batch sweep")
    p.add_argument("--config", help="pull rates and node count from a config file")
    p.add_argument("--streaming", type=float, help="R_s, samples/second")
    p.add_argument("--processing", type=float, help="R_p, samples/second/node")
    p.add_argument("--messaging", type=float, help="R_c, messages/second")
    p.add_argument("--nodes", type=int, help="N, compute nodes")
    p.add_argument("--rounds", help="fixed round count, or 'max' (default)")
    p.add_argument("--batches", help="comma list of mini-batch sizes to evaluate")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config")
    p.add_argument("--set", action="append", metavar="SECTION.OPTION=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--workers", type=int, default=None, help="parallel trial workers")
    p.add_argument("--outdir", help="output directory (default $STREAMDIST_OUTDIR or .)")
    p.add_argument("--csv", help="explicit CSV output path")
    p.add_argument("--raw", help="also dump per-trial records to this CSV path")
    p.add_argument("--plot", action="store_true", help="render the figure next to the CSV")
    p.add_argument("--metric", help="metric to plot (default excess_risk)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a config repeatedly over an axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True, help=f"one of {_SWEEP_AXES}")
    p.add_argument("--values", required=True, help="comma list of axis values")
    p.add_argument("--set", action="append", metavar="SECTION.OPTION=VALUE")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--outdir")
    p.add_argument("--csv")
    p.add_argument("--raw")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--metric")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render a figure from a results CSV")
    p.add_argument("results", help="aggregated results CSV")
    p.add_argument("--out", help="output figure path (default: CSV path with .svg)")
    p.add_argument("--metric")
    p.add_argument("--x", default="t_prime", choices=("t_prime", "t", "sim_seconds"))
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("topo", help="inspect a topology")
    p.add_argument("--kind", required=True)
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--weight-rule", default="metropolis", choices=("metropolis", "uniform"))
    p.add_argument("--matrix-csv")
    p.set_defaults(func=cmd_topo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"streamdist: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except H.ConfigError as exc:
        print(f"streamdist: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"streamdist: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
