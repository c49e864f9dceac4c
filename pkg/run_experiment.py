import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from core import ConfigError
from experiment import ExperimentSpec, load_experiment_spec, parse_seed, quick_profile, run_experiment, \
    validate_experiment_spec

DEFAULT_CONFIG = Path(__file__).parent / "configs" / "reference.json"

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_RUN_FAILURES = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Dual-band (2.4 GHz / 868 MHz) 6TiSCH simulation sweeps")
    parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG, help="experiment JSON file")
    parser.add_argument("--quick", action="store_true", help="desk-scale profile: 600 s setup, 900 s traffic, 10/20/40 nodes, 5 seeds")
    parser.add_argument("--seeds", type=str, default=None, help="comma-separated seeds, e.g. 1,2,0x10")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--workers", type=int, default=1, help="number of cases run in parallel")
    parser.add_argument("--strict-paper-mode", action="store_true",
                        help="reject band configurations that differ from the reference ones")
    parser.add_argument("--log-level", type=str, default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def resolve_spec(args: argparse.Namespace) -> ExperimentSpec:
    spec = load_experiment_spec(args.config)
    if args.quick:
        spec = quick_profile(spec)
    if args.seeds is not None:
        spec = spec.replace(seeds=tuple(parse_seed(s.strip()) for s in args.seeds.split(",") if s.strip()))
    if args.out is not None:
        spec = spec.replace(output_dir=str(args.out))
    if args.strict_paper_mode:
        spec = spec.replace(strict_paper_mode=True)
    validate_experiment_spec(spec)
    return spec


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        spec = resolve_spec(args)
    except ConfigError as e:
        logging.getLogger(__name__).error("invalid configuration: %s", e)
        return EXIT_CONFIG_ERROR

    result = run_experiment(spec, workers=args.workers)
    logging.getLogger(__name__).info("%d case(s) completed, %d failed, results in %s",
                                     len(result.cases), len(result.failures), spec.output_dir)
    return EXIT_RUN_FAILURES if result.failures else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
