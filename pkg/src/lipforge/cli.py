"""Command line: ``lipforge build|verify|baseline|report``."""

import argparse
import logging
import sys

from . import __version__, pipeline
from .config import ConfigError
from .expr import ParseError
from .fieldio import FieldFormatError


def _parser():
    p = argparse.ArgumentParser(prog="lipforge", description="Construct and certify maps with prescribed "
                                "local Lipschitz constant.")
    p.add_argument("--version", action="version", version=f"lipforge {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="only log errors")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", parents=[common], help="construct, verify and export a run")
    b.add_argument("config")
    b.add_argument("--out", help="run directory (default: out.dir from the config)")
    b.add_argument("--imax", type=int, help="override run.imax")
    b.add_argument("--seed", type=int, help="override run.seed")
    b.add_argument("--slow", action="store_true", help="also certify coverage and volume at scales >= 10")
    b.add_argument("--export-lattice", metavar="NxM", help="lattice counts for u.lipx")

    v = sub.add_parser("verify", parents=[common], help="recompute certificates from a run directory")
    v.add_argument("run_dir")
    v.add_argument("--slow", action="store_true")

    g = sub.add_parser("baseline", parents=[common], help="fast marching and McShane grid fields")
    g.add_argument("config")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)

    r = sub.add_parser("report", parents=[common], help="summarise a run directory")
    r.add_argument("run_dir")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        if args.command == "build":
            cfg = pipeline.load_config(args.config, args.imax, args.seed)
            lattice = pipeline.parse_lattice(args.export_lattice, cfg.d) if args.export_lattice else None
            return pipeline.build(cfg, args.out, args.slow, lattice)
        if args.command == "verify":
            return pipeline.verify(args.run_dir, args.slow)
        if args.command == "baseline":
            cfg = pipeline.load_config(args.config, seed=args.seed)
            return pipeline.baseline(cfg, args.out)
        return pipeline.report(args.run_dir, sys.stdout)
    except (ConfigError, ParseError) as err:
        print(f"lipforge: {args.config if hasattr(args, 'config') else ''}: {err}", file=sys.stderr)
        return pipeline.EXIT_CONFIG
    except (OSError, FieldFormatError) as err:
        print(f"lipforge: {err}", file=sys.stderr)
        return pipeline.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
