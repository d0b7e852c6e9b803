"""``bisup`` command line.

    bisup synth|calibrate|trace|ablate|sweep|gradcheck --config run.json [--seed N]
          [--spec W3A3-g16] [--out PATH] [--format json|csv]

Exit codes: 0 success, 2 configuration error, 3 numeric failure (including
a failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, NumericError
from .experiments import COMMANDS, load_run_config, render_report, run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bisup", description="Quantization calibration experiments on a toy transformer.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--spec", help="quantization config such as W3A3-g16")
    p.add_argument("--out", help="output path (model file for synth/calibrate, report otherwise)")
    p.add_argument("--format", choices=("json", "csv"))
    p.add_argument("--model", help="BSMD model file to start from")
    p.add_argument("--full-axes", action="store_true", help="sweep over the full-size axes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, command=args.command, seed=args.seed, spec=args.spec,
                              out=args.out, format=args.format, model=args.model,
                              full_axes=args.full_axes or None)
        report = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if cfg.out is None:
        sys.stdout.write(render_report(report, cfg.format))
    if cfg.command == "gradcheck" and not report["results"]["passed"]:
        print("gradient check failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
