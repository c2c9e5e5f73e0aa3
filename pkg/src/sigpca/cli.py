"""Command-line entry point: ``sigpca <command> [--config PATH] [--out DIR] ...``."""
from __future__ import annotations

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from .container import ContainerError
from .data import DataError
from .neuralnet import NumericError
from .pipeline import PipelineError
from .workflow import STAGES, ConfigError, load_run_config, run_all, run_stage, stage_synth

log = logging.getLogger("sigpca")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--seed", type=int, help="seed for subset selection, network init and shuffling")
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("--variant", action="append",
                        help="method variant; repeat for several (overrides config 'variants')")
    common.add_argument("--no-cache", action="store_true", help="recompute signature features")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="sigpca", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic model/station/truth dataset")
    sub.add_parser("run", parents=[common], help="run every step and the evaluation")
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run only the '{stage}' stage")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    stage = args.command
    try:
        rc = load_run_config(args.config, out=args.out, seed=args.seed, threads=args.threads,
                             variants=args.variant)
        with threadpool_limits(limits=int(rc.threads)):
            if stage == "synth":
                stage_synth(rc)
            elif stage == "run":
                run_all(rc, use_cache=not args.no_cache)
            else:
                for v in rc.variants:
                    run_stage(rc, stage, v)
    except (ConfigError, PipelineError) as exc:
        print(f"sigpca {stage}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContainerError, FileNotFoundError) as exc:
        print(f"sigpca {stage}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, ArithmeticError) as exc:
        print(f"sigpca {stage}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"sigpca {stage}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
