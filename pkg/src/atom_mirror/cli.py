"""Command-line entry point: ``atom-mirror --config run.yaml``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .engine import NumericalError, SteadyStateError
from .experiments import NUMERICAL_ERRORS, SweepPointError, run_experiment, validation_suite
from .fitting import NoResonanceError
from .parallel import WorkerFailure, schedule_trajectories  # noqa: F401  (re-export)
from .serialize import serialize  # noqa: F401  (re-export)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("atom_mirror")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atom-mirror",
                                description="Delayed-feedback emitter simulator and analysis")
    p.add_argument("--config", metavar="PATH", help="YAML experiment file")
    p.add_argument("--experiment", metavar="NAME", help="override the configured experiment")
    p.add_argument("--seed", type=int, metavar="N", help="master seed")
    p.add_argument("--trajectories", type=int, metavar="N", help="trajectories per point")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--threads", type=int, metavar="N", help="worker processes")
    p.add_argument("--validate", action="store_true", help="run the oracle self-checks")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"experiment": "validate" if args.validate else args.experiment,
                 "master_seed": args.seed, "n_trajectories": args.trajectories,
                 "output": args.out, "workers": args.threads}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        files = run_experiment(cfg)
    except (SweepPointError, WorkerFailure, NumericalError, SteadyStateError,
            NoResonanceError) + NUMERICAL_ERRORS as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    for f in files:
        print(f)
    if cfg.experiment == "validate":
        import json
        meta = json.loads((cfg.output / "metadata.json").read_text())
        print((cfg.output / "validate.csv").read_text(), end="")
        if not meta["all_passed"]:
            return EXIT_NUMERICAL
    return EXIT_OK


__all__ = ["main", "build_parser", "run_experiment", "schedule_trajectories", "serialize",
           "validation_suite"]

if __name__ == "__main__":
    sys.exit(main())
