"""Command-line entry points for running and comparing experiments."""
from __future__ import annotations

import argparse
import dataclasses
import sys

from . import harness
from .diffcore import NumericError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


def _add_common(parser):
    parser.add_argument("--config", required=True, help="path to a JSON experiment config")
    parser.add_argument("--out", default=None, help="override the config's output directory")
    parser.add_argument("--seed-override", type=int, default=None,
                        help="run a single seed instead of the configured list")


def _load(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    if args.seed_override is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed_override,))
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(prog="normatch",
                                     description="semi-supervised training experiments on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train with the configured policy")
    _add_common(run)

    cmp_ = sub.add_parser("compare", help="run several weighting policies on identical data")
    _add_common(cmp_)
    cmp_.add_argument("--policies", required=True,
                      help="comma-separated, e.g. ncue,ncue-zero,threshold:0.95,none")

    sweep = sub.add_parser("sweep-lambda", help="sweep the flow-likelihood loss weight")
    _add_common(sweep)
    sweep.add_argument("--values", default="0,1e-7,1e-6,1e-5,1e-4",
                       help="comma-separated weights")

    export = sub.add_parser("export-data", help="write the configured datasets as CSV")
    _add_common(export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "run":
            result = harness.run_experiment(cfg)
            print(harness.summarize(result))
        elif args.command == "compare":
            policies = [p.strip() for p in args.policies.split(",") if p.strip()]
            if not policies:
                raise harness.ConfigError("no policies given")
            results = harness.compare_policies(cfg, policies)
            for text, res in results.items():
                print(f"{text}: {harness.summarize(res)}")
        elif args.command == "sweep-lambda":
            values = [float(v) for v in args.values.split(",") if v.strip()]
            for lam, res in harness.lambda_sweep(cfg, values):
                print(f"lam={lam:g}: {harness.summarize(res)}")
        elif args.command == "export-data":
            for path in harness.export_datasets(cfg, cfg.output_dir):
                print(path)
    except (harness.ConfigError, harness.CheckpointError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
