#
# Copyright 2025 The mmesh contributors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#

"""Command-line interface: mmesh run | check | report."""

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .errors import ConfigError, MeshError, SolverError
from .run import format_report, run_checks, run_experiment

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.out:
        config = config.with_output_dir(args.out)
    run_experiment(config, name=Path(args.config).stem)
    return EXIT_OK


def cmd_check(args) -> int:
    reports = run_checks(seed=args.seed, meshes=args.meshes, coercivity_samples=args.samples)
    failed = [r for r in reports if not r.passed]
    if failed:
        logger.error(f"{len(failed)} of {len(reports)} checks failed")
        return EXIT_FAILED
    logger.info(f"All {len(reports)} checks passed")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.dir)
    if not root.is_dir():
        logger.error(f"ERROR: {root} is not a directory")
        return EXIT_FAILED
    print(format_report(root))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmesh",
        description="mmesh - moving-mesh adaptation of simplicial meshes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Reproduce the sine-band experiment
  mmesh run presets/sine_band.conf --out out/sine_band

  # Run the property oracles (gradient, scale invariance, coercivity, ...)
  mmesh check --seed 1

  # Summarize every run below a directory
  mmesh report out/

Exit codes:
  0  success
  1  failed check or unexpected error
  2  configuration error
  3  solver or mesh failure during a run
        """
    )
    parser.add_argument("--verbose", action="store_true", help="Enable verbose logging (DEBUG level)")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one adaptation experiment from a config file")
    run.add_argument("config", help="Path to the experiment config (key = value format)")
    run.add_argument("--out", help="Output directory (overrides output.dir)")
    run.set_defaults(handler=cmd_run)

    check = sub.add_parser("check", help="Run the numerical property checks")
    check.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    check.add_argument("--meshes", type=int, default=20,
                       help="Random meshes per functional for the gradient check (default: 20)")
    check.add_argument("--samples", type=int, default=10_000,
                       help="Random SPD samples for the coercivity check (default: 10000)")
    check.set_defaults(handler=cmd_check)

    report = sub.add_parser("report", help="Print a summary table of the runs below a directory")
    report.add_argument("dir", help="Directory searched recursively for summary.csv")
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv=None) -> int:
    """Main entry point for the CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)

    # Console mode: timestamp + message
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s %(levelname)s %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        stream=sys.stdout,
        force=True
    )
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
        logger.debug("Verbose logging enabled")
    elif args.quiet:
        logging.getLogger().setLevel(logging.WARNING)

    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"ERROR: {e}")
        return EXIT_CONFIG
    except (SolverError, MeshError) as e:
        logger.error(f"ERROR: {e}")
        return EXIT_SOLVER
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return EXIT_FAILED
    except Exception as e:
        logger.error(f"ERROR: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
