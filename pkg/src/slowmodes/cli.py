"""Command-line experiment runner.

Subcommands: simulate, train, fit, oracle, compare, pipeline.  Exit codes:
0 success, 2 configuration error, 3 numeric error, 4 simulation divergence.
"""
from __future__ import annotations

import argparse
import os
import sys


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slowmodes",
        description="Generator spectral estimation from biased Langevin runs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in [
        ("simulate", "integrate the configured dynamics"),
        ("train", "train the MLP feature dictionary"),
        ("fit", "assemble covariances and solve the ridge eigenproblem"),
        ("oracle", "grid ground-truth eigenpairs"),
        ("compare", "join generator, baseline and oracle outputs"),
        ("pipeline", "run every configured stage in order"),
    ]:
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--output", default=None,
                       help="output directory (default: config 'output' or 'out')")
        p.add_argument("--threads", type=int, default=None,
                       help="cap worker threads")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))

    # heavy imports only after thread env vars are pinned
    from pathlib import Path

    from . import errors, pipeline

    if args.threads is not None:
        import torch

        torch.set_num_threads(args.threads)

    try:
        cfg = pipeline.load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        outdir = Path(args.output or cfg.get("output") or "out")
        outdir.mkdir(parents=True, exist_ok=True)

        if args.command == "simulate":
            path = pipeline.stage_simulate(cfg, outdir)
        elif args.command == "train":
            path = pipeline.stage_train(cfg, outdir)
        elif args.command == "fit":
            path = pipeline.stage_fit(cfg, outdir)
        elif args.command == "oracle":
            path = pipeline.stage_oracle(cfg, outdir)
        elif args.command == "compare":
            path = pipeline.stage_compare(cfg, outdir).outdir / "results.json"
        else:
            path = pipeline.run_pipeline(cfg, outdir).outdir / "results.json"
        print(path)
        return 0
    except errors.SimulationDivergenceError as err:
        print(f"divergence error: {err}", file=sys.stderr)
        return 4
    except (errors.NumericError, errors.GradientCheckError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 3
    except errors.SlowmodesError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
