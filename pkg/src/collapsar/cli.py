"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 failed check (only with ``--check``).
"""
from __future__ import annotations

import argparse
import os
import sys
import time

from .errors import CollapsarError, ConfigError
from .runner import (EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, run, run_factorize,
                     run_sample_noise, write_outputs)
from .scenario import parse_scenario

SUBCOMMANDS = {
    "factorize-kernel": ("export the oscillator-mode decomposition of the kernel", None, run_factorize),
    "sample-noise": ("sample hidden variables and noises, with covariance statistics", None, run_sample_noise),
    "run-markov": ("Markovian Itô ensemble against the Lindblad equation", "markov", None),
    "run-nonmarkov": ("non-Markovian linear and normalised trajectories", "nonmarkov", None),
    "run-bohm": ("Bohmian bath trajectories", "bohm", None),
    "run-oracle": ("density-matrix propagation of the influence map", "oracle", None),
    "compare": ("Bohmian conditional states against collapse trajectories", "compare", None),
    "run": ("run the mode named in the scenario", None, None),
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collapsar", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (help_text, _, _) in SUBCOMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--scenario", required=True, help="scenario JSON file")
        s.add_argument("--seed", type=int, default=None, help="override run.seed")
        s.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        s.add_argument("--threads", type=int, default=None,
                       help="worker threads for trajectory ensembles (env COLLAPSAR_THREADS)")
        s.add_argument("--check", action="store_true", help="exit with status 4 if any check fails")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    started = time.time()
    threads = args.threads
    if threads is None and os.environ.get("COLLAPSAR_THREADS"):
        try:
            threads = int(os.environ["COLLAPSAR_THREADS"])
        except ValueError:
            print("error: COLLAPSAR_THREADS must be an integer", file=sys.stderr)
            return EXIT_CONFIG
    try:
        sc = parse_scenario(args.scenario).with_overrides(seed=args.seed, out_dir=args.out, threads=threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _, mode, action = SUBCOMMANDS[args.command]
    try:
        res = run(sc, mode=mode, action=action)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CollapsarError, ArithmeticError, MemoryError, ValueError) as exc:
        print(f"numerical failure in {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    manifest = write_outputs(sc, res, sc.out_dir, started, args.command)
    for c in manifest["checks"]:
        flag = "PASS" if c["passed"] else ("FAIL" if c["enforced"] else "WARN")
        print(f"{flag}  {c['tag']}: {c['value']} (threshold {c['threshold']})")
    if args.check and not manifest["all_checks_passed"]:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
