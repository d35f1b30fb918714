"""Command-line entry point: ``mpix-bench --config run.yaml``."""

from __future__ import annotations

import argparse
import logging
import sys

from ..collectives import ALLGATHER, ALLTOALLV, list_algorithms
from .config import PATTERN_ALGORITHMS, ConfigError, build_config, load_config
from .runner import EXIT_USAGE, run


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mpix-bench",
                description="Run message-passing extensions on a simulated cluster and count traffic.")
    p.add_argument("--config", help="YAML run configuration (flat key: value mapping)")
    p.add_argument("--ranks", type=int)
    p.add_argument("--ppn", type=int, help="ranks per node, contiguous placement")
    p.add_argument("--pattern", choices=sorted(PATTERN_ALGORITHMS))
    p.add_argument("--algorithm", action="append", dest="algorithms", metavar="NAME",
                   help="algorithm to run; repeatable (default: all for the pattern)")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--cycles", type=int)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--timeout-s", type=float, dest="timeout_s", help="per-trial watchdog seconds")
    p.add_argument("--verify", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--list-algorithms", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.list_algorithms:
        for kind in (ALLTOALLV, ALLGATHER):
            for info in list_algorithms(kind):
                suffix = "\t(default)" if info.is_default else ""
                print(f"{kind}\t{info.name}{suffix}")
        for name in ("neighbor-standard", "neighbor-locality", "partitioned", "p2p"):
            print(f"pattern-specific\t{name}")
        return 0

    overrides = {k: getattr(args, k) for k in
                 ("ranks", "ppn", "pattern", "algorithms", "seed", "trials", "cycles", "out",
                  "timeout_s", "verify")}
    try:
        if args.config:
            cfg = load_config(args.config, overrides)
        else:
            cfg = build_config({k: v for k, v in overrides.items() if v is not None})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    report = run(cfg)
    text = report.to_csv()
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    for row in report.rows:
        if row.error:
            print(f"{row.pattern}/{row.algorithm} trial {row.trial}: {row.error}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
