"""Command line entry point.

    chunkswarm run --config round.yaml [--seed N] [--sweep axis=v1,v2,...]
                   [--out dir] [--attacks all|none|list] [--audit verify]

Exit codes: 0 success, 2 configuration error, 3 audit rejection, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .harness import SWEEP_AXES, emit_report, run_experiment, run_sweep, summary_text

EXIT_CONFIG = 2
EXIT_AUDIT = 3
EXIT_IO = 4


def parse_sweep(text: str):
    axis, sep, values = text.partition("=")
    axis = axis.strip()
    if not sep or axis not in SWEEP_AXES:
        raise ConfigError(f"--sweep expects axis=v1,v2,... with axis in {SWEEP_AXES}")
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not vals:
        raise ConfigError("--sweep needs at least one value")
    try:
        vals = [float(v) if axis in ("beta", "R") else int(v) for v in vals]
    except ValueError:
        raise ConfigError(f"--sweep values for {axis} must be numeric") from None
    return axis, vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chunkswarm", description="Privacy-hardened swarm round simulator")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="simulate one round or a sweep and write CSV reports")
    r.add_argument("--config", required=True, help="YAML or JSON file with RoundConfig keys")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--sweep", default=None, help="axis=v1,v2,... over n, m, beta, R or attackers")
    r.add_argument("--seeds", type=int, default=1, help="replicates per sweep point")
    r.add_argument("--workers", type=int, default=1, help="parallel sweep points")
    r.add_argument("--out", default="out", help="output directory")
    r.add_argument("--attacks", default="all", help="all, none or a comma list of attack names")
    r.add_argument("--audit", choices=["verify"], default=None, help="replay the round log audit")
    r.add_argument("--bound", action="store_true", help="compute the per-stage max-flow bound")
    r.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    audit = args.audit == "verify"
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.replace(seed=args.seed)
        kw = dict(attacks=args.attacks, audit=audit, bound=args.bound)
        if args.sweep:
            axis, values = parse_sweep(args.sweep)
            reports = run_sweep(config, axis, values, seeds=args.seeds, workers=args.workers, **kw)
        else:
            axis = None
            reports = [run_experiment(config, **kw)]
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO if not isinstance(e, FileNotFoundError) else EXIT_CONFIG
    try:
        emit_report(reports, args.out, axis)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    sys.stdout.write(summary_text(reports, axis))
    rejected = [r for r in reports if r.audit.startswith("reject")]
    if rejected:
        for r in rejected:
            print(f"audit rejected seed {r.seed}: {r.audit}", file=sys.stderr)
        return EXIT_AUDIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
