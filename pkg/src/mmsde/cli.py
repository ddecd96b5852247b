"""Command-line front end: ``mmsde <task> <scenario> [options]``.

Exit codes: 0 success, 1 validation, regime, assumption or capability
failure, 2 usage error.  Results go to files in ``--out``; nothing is
written to standard output unless ``--stdout`` is given.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import MmsdeError
from .harness import (BUILTIN_SCENARIOS, TASKS, load_scenario, run_experiment, summarize,
                      with_overrides)
from .paths import write_path_csv

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class _UsageError(Exception):
    pass


def _eps_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") \
            from None
    if not values:
        raise argparse.ArgumentTypeError("empty epsilon list")
    return values


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="mmsde", description="Multiscale multivalued SDE "
                                     "experiments: simulation, averaging and large deviations.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for task in TASKS:
        p = sub.add_parser(task, help=f"run the {task} task on a scenario")
        p.add_argument("scenario", help="scenario JSON file or built-in name")
        p.add_argument("--out", default="results", help="output directory (default: results)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--reps", type=_positive_int, help="override the replication count")
        p.add_argument("--paths", type=_positive_int, help="override the tail-probe path count")
        p.add_argument("--eps", type=_eps_list, help="comma-separated epsilon list")
        p.add_argument("--gamma-pow", type=float, help="gamma = epsilon^p with this p")
        p.add_argument("--jobs", type=_positive_int, default=1,
                       help="worker threads; results do not depend on it")
        p.add_argument("--stdout", action="store_true", help="also print the CSV summary")
    sub.add_parser("list-scenarios", help="print the built-in scenario names")
    return parser


def _write_outputs(result, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{result.scenario['name']}_{result.task}"
    provenance = {"scenario_sha256": result.scenario_sha256, "seed": result.seed,
                  "task_seed": result.task_seed, "task": result.task}
    header = "".join(f"# {k}={v}\n" for k, v in provenance.items())
    table = summarize([result])
    csv_path = out_dir / f"{stem}.csv"
    csv_path.write_text(header + table)
    (out_dir / f"{stem}.json").write_text(result.to_json() + "\n")
    written = [csv_path, out_dir / f"{stem}.json"]
    if result.paths:
        slow = result.paths[0]
        path_file = out_dir / f"{stem}_path0.csv"
        with open(path_file, "w") as fh:
            write_path_csv(slow.replication(0), fh, {**provenance, "replication": 0})
        written.append(path_file)
    return table, written


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command == "list-scenarios":
        sys.stdout.write("".join(f"{name}\n" for name in BUILTIN_SCENARIOS))
        return EXIT_OK
    try:
        spec = load_scenario(args.scenario)
        if any(v is not None for v in (args.eps, args.gamma_pow, args.seed, args.reps,
                                       args.paths)):
            spec = with_overrides(spec, epsilons=args.eps, gamma_power=args.gamma_pow,
                                  seed=args.seed, replications=args.reps,
                                  tail_paths=args.paths)
        print(f"mmsde: running {args.command} on {spec.name} (seed {spec.seed})",
              file=sys.stderr)
        result = run_experiment(spec, args.command, jobs=args.jobs)
        table, written = _write_outputs(result, Path(args.out))
    except MmsdeError as exc:
        print(f"mmsde: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"mmsde: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for path in written:
        print(f"mmsde: wrote {path}", file=sys.stderr)
    if args.stdout:
        sys.stdout.write(table)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
