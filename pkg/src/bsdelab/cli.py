"""Command line: ``bsdelab run | list-builtins | calibrate``.

Exit codes: 0 every verdict PASS, 1 infrastructure error, 2 a hypothesis
check aborted the experiment, 3 ran to completion with a FAIL verdict.
With several configs an infrastructure error stops the run at once;
otherwise 2 outranks 3.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import __version__
from .config import dump_config, load_config
from .errors import BsdeLabError, HypothesisViolation
from .generators import catalog

EXIT_OK, EXIT_INFRA, EXIT_HYPOTHESIS, EXIT_FAIL = 0, 1, 2, 3
THREADS_ENV = "BSDELAB_THREADS"

log = logging.getLogger("bsdelab")


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(raw))


def cmd_run(args) -> int:
    from .runner import aborted_report, run_experiment

    worst = EXIT_OK
    for path in args.config:
        try:
            cfg = load_config(path, args.override, args.seed, args.paths, args.steps, args.out)
        except BsdeLabError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INFRA
        out = Path(cfg.output)
        stem = f"{cfg.kind}_{cfg.hash[:12]}"
        try:
            with _thread_limit():
                reports = run_experiment(cfg)
        except HypothesisViolation as exc:
            print(f"hypothesis violation ({type(exc).__name__}): {exc}", file=sys.stderr)
            aborted_report(cfg, exc).write(out, stem)
            worst = EXIT_HYPOTHESIS
            continue
        except (BsdeLabError, ArithmeticError, ValueError, KeyError, MemoryError) as exc:
            print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
            return EXIT_INFRA
        for k, rep in enumerate(reports):
            written = rep.write(out, stem if k == 0 else f"{stem}.{rep.tag}")
            print(f"{rep.verdict:4s} {rep.tag:20s} {written}")
            for name, ok in rep.rules.items():
                print(f"     {'ok  ' if ok else 'FAIL'} {name}")
            if rep.verdict == "FAIL" and worst != EXIT_HYPOTHESIS:
                worst = EXIT_FAIL
    return worst


def cmd_list(args) -> int:
    cat = catalog()
    if args.json:
        print(json.dumps(cat, indent=2))
        return EXIT_OK
    for section, entries in cat.items():
        print(f"{section}:")
        for name, params in entries.items():
            inner = ",".join(params)
            print(f"  {name}{{{inner}}}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .generators import make_generator, make_terminal
    from .harness import StabilitySequence, calibrate
    from .solver import RegressionBasis

    bases = [RegressionBasis(int(d)) for d in args.degrees.split(",")]
    seq = StabilitySequence(make_generator("linear", {"a": -1.0, "b": 0.5}), make_terminal("bounded_sin"),
                            make_terminal("abs_sin"))
    with _thread_limit():
        cal = calibrate(args.T, args.steps, args.paths, args.seed, bases, stability=seq, mu=args.mu)
    text = json.dumps(cal.to_dict(), indent=2, sort_keys=True)
    if args.write:
        Path(args.write).write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsdelab", description="BSDE Monte-Carlo experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run experiment configs")
    r.add_argument("--config", action="append", required=True, help="JSON config (repeatable)")
    r.add_argument("--seed", type=int)
    r.add_argument("--paths", type=int)
    r.add_argument("--steps", type=int)
    r.add_argument("--out")
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted key assignment, value parsed as JSON when possible")
    r.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    r.set_defaults(func=cmd_run)

    ls = sub.add_parser("list-builtins", help="generator, terminal and rho registries")
    ls.add_argument("--json", action="store_true")
    ls.set_defaults(func=cmd_list)

    c = sub.add_parser("calibrate", help="fit tol_unique, tol_cmp and tol_stab on the affine oracle")
    c.add_argument("--T", type=float, default=1.0)
    c.add_argument("--steps", type=int, default=50)
    c.add_argument("--paths", type=int, default=100_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--mu", type=float, default=1.0)
    c.add_argument("--degrees", default="7,11,13")
    c.add_argument("--write", help="also write the JSON to this path")
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "run" and args.print_config:
        for path in args.config:
            try:
                print(dump_config(load_config(path, args.override, args.seed, args.paths, args.steps, args.out)))
            except BsdeLabError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_INFRA
        return EXIT_OK
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
