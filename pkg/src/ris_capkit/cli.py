"""``ris-capkit`` command line.

Exit codes: 0 on success, 2 on a validation error, 3 on a numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, NumericalError
from .experiments import EXPERIMENTS, ExperimentResult, RunOptions, run_experiment
from .results import Sidecar, self_test, write_csv, write_sidecar
from .scenario import load_scenario, scenario_to_dict, table1_scenario

__all__ = ["main", "build_parser", "write_result"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("ris_capkit")


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _nonnegative(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be a nonnegative integer")
    return value


def build_parser():
    p = argparse.ArgumentParser(prog="ris-capkit", description="RIS-assisted MIMO-MAC sum-MI experiments.")
    p.add_argument("experiment", choices=sorted(EXPERIMENTS))
    p.add_argument("--scenario", type=Path, help="TOML scenario (default: built-in reference setup)")
    p.add_argument("--seed", type=_nonnegative, help="overrides the scenario seed")
    p.add_argument("--samples", type=_positive, help="Monte Carlo samples per check")
    p.add_argument("--workers", type=_positive, default=1)
    p.add_argument("--paper-scale", action="store_true", help="ns = 400 (and 900 for two-size figures)")
    p.add_argument("--ns", type=_positive, help="RIS size override (perfect square)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--plot", action="store_true", help="also render <experiment>.png")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _meta(result: ExperimentResult):
    return {
        "experiment": result.experiment,
        "scenario_hash": result.scenario_hash,
        "seed": result.seed,
        "scenario": json.dumps(scenario_to_dict(result.config), sort_keys=True, separators=(",", ":")),
    }


def write_result(result: ExperimentResult, out: Path, plot=False, started=None):
    """Write every table as CSV plus the JSON sidecar; returns the paths."""
    out = Path(out)
    started = started or _dt.datetime.now(_dt.timezone.utc)
    paths = []
    for t in result.tables:
        name = result.experiment + (f"_{t.suffix}" if t.suffix else "") + ".csv"
        paths.append(write_csv(out / name, t.schema, t.rows, _meta(result)))
    if plot:
        from .plotting import plot_result

        paths.append(plot_result(result, out / f"{result.experiment}.png"))
    sidecar = Sidecar(result.experiment, result.scenario_hash, result.seed, scenario_to_dict(result.config),
                      result.summary, [p.name for p in paths])
    paths.append(write_sidecar(out / f"{result.experiment}.json", sidecar, started,
                               _dt.datetime.now(_dt.timezone.utc)))
    return paths


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = _dt.datetime.now(_dt.timezone.utc)
    try:
        self_test()
        config = load_scenario(args.scenario) if args.scenario else table1_scenario()
        opts = RunOptions(seed=args.seed, samples=args.samples, workers=args.workers, paper_scale=args.paper_scale,
                          ns=args.ns, keep_ns=args.scenario is not None)
        result = run_experiment(args.experiment, config, opts)
    except (ConfigError, OSError) as exc:
        print(f"ris-capkit: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        partial = getattr(exc, "partial_result", None)
        if partial is not None:
            write_result(partial, args.out, started=started)
        print(f"ris-capkit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for path in write_result(result, args.out, args.plot, started):
        log.info("wrote %s", path)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
