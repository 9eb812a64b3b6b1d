"""Command-line entry point: ``berryharvest <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .fingers import DomainError
from .grasp import DEFAULT_PULL_CAPACITY, Infeasible, RetentionModel, calibrate_slip, force_table_rows
from .harness import EXIT_OK, EXIT_VALIDATION, emit_plots, monte_carlo, run, write_artifacts
from .ripeness import NotSeparable, fit_threshold, load_samples_csv
from .scenario import ScenarioError, load_scenario

log = logging.getLogger("berryharvest")


def _dump(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    art = run(scenario, seed=args.seed)
    out = write_artifacts(art, args.out or Path("runs") / f"{scenario.name}-seed{art.seed}")
    st = art.report.aggregate_stats
    print(f"{scenario.name} seed={art.seed}: {st['successes']}/{st['attempts']} detached, "
          f"{st['servo_iterations']} servo iterations -> {out}")
    return art.exit_code


def cmd_montecarlo(args) -> int:
    scenario = load_scenario(args.scenario)
    mc = monte_carlo(scenario, args.trials, master_seed=args.seed, workers=args.workers)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "montecarlo.json").write_text(json.dumps(mc.to_dict(include_trials=True), indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
        with (out / "force_table.csv").open("w", encoding="utf-8") as fh:
            fh.writelines(",".join(row) + "\n" for row in force_table_rows(mc.aggregate_stats))
    _dump(mc.to_dict())
    return mc.exit_code


def cmd_calibrate_threshold(args) -> int:
    ripe = load_samples_csv(args.ripe, args.column)
    unripe = load_samples_csv(args.unripe, args.column)
    print(f"{fit_threshold(ripe, unripe, mode=args.mode):.6g}")
    return EXIT_OK


def cmd_calibrate_slip(args) -> int:
    model = load_scenario(args.scenario).retention if args.scenario else RetentionModel()
    print(f"{calibrate_slip(args.target, model, pull_capacity=args.capacity):.6g}")
    return EXIT_OK


def cmd_emit_plots(args) -> int:
    for p in emit_plots(args.run_dir):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="berryharvest", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one scenario and write its artifacts")
    s.add_argument("scenario", help="scenario JSON, run manifest, or preset name")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory (default runs/<name>-seed<N>)")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("montecarlo", help="independent replicas with pooled statistics")
    m.add_argument("scenario")
    m.add_argument("--trials", type=int, required=True)
    m.add_argument("--seed", type=int, help="master seed (default: scenario seed)")
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--out")
    m.set_defaults(func=cmd_montecarlo)

    t = sub.add_parser("calibrate-threshold", help="reflectance threshold from labelled readings")
    t.add_argument("ripe")
    t.add_argument("unripe")
    t.add_argument("--mode", choices=["midpoint", "min-error"], default="midpoint")
    t.add_argument("--column")
    t.set_defaults(func=cmd_calibrate_threshold)

    c = sub.add_parser("calibrate-slip", help="slip probability giving a target ripe-pull efficiency")
    c.add_argument("--target", type=float, required=True)
    c.add_argument("--capacity", type=float, default=DEFAULT_PULL_CAPACITY)
    c.add_argument("--scenario", help="take the retention model from this scenario")
    c.set_defaults(func=cmd_calibrate_slip)

    e = sub.add_parser("emit-plots", help="plot-ready CSVs from a run directory")
    e.add_argument("run_dir")
    e.set_defaults(func=cmd_emit_plots)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, NotSeparable, Infeasible, DomainError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
