"""Command-line entry point: simulate, extract, verify, compare.

Flags only select the command, the config file, and the output locations;
every numerical parameter lives in the config (see pipeline.load_config).
Exit status: 0 success, 1 check or certificate failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import sys

from . import pipeline
from .errors import ConfigError, ParameansError, SchemaError


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="parameans",
        description="Circle-mean data on a parabola: simulate boundary "
                    "data, extract exterior spherical means, verify the "
                    "whole chain, compare result files.")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="sample the phantom's circle "
                         "means on the data parabola and write the "
                         "boundary CSV")
    ext = sub.add_parser("extract", help="turn a boundary CSV into "
                         "recovered exterior spherical means")
    ver = sub.add_parser("verify", help="run the full acceptance "
                         "checklist at the configured scale")
    cmp_ = sub.add_parser("compare", help="diff two exterior CSVs cell "
                          "by cell")

    for p in (sim, ext, ver):
        p.add_argument("--config", required=True, metavar="PATH",
                       help="run configuration file")
        p.add_argument("--out", required=True, metavar="DIR",
                       help="output directory (created if absent)")
    ext.add_argument("--boundary", required=True, metavar="CSV",
                     help="boundary data file from a simulate run")
    cmp_.add_argument("file_a", help="reference exterior CSV")
    cmp_.add_argument("file_b", help="exterior CSV to compare against it")
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            cfg = pipeline.load_config(args.config)
            path = pipeline.run_simulate(cfg, args.out)
            print(f"wrote {path}")
            return 0
        if args.command == "extract":
            cfg = pipeline.load_config(args.config)
            path = pipeline.run_extract(cfg, args.boundary, args.out)
            print(f"wrote {path}")
            return 0
        if args.command == "verify":
            cfg = pipeline.load_config(args.config)
            report = pipeline.run_verify(cfg, args.out)
            print(report.to_text())
            return 0 if report.passed else 1
        metrics = pipeline.compare(args.file_a, args.file_b)
        print(f"max  {metrics['max_rel']:.6e}")
        print(f"rms  {metrics['rms_rel']:.6e}")
        wx, we, wr = metrics["worst"]
        print(f"worst cell  xi={wx:g} eta={we:g} r={wr:g}")
        return 0
    except (ConfigError, SchemaError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2
    except ParameansError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
