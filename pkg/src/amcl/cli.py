"""Command-line entry point: ``amcl <stage> [--config FILE] [--set section.key=value ...]``."""
import argparse
import logging
import sys

from .experiment import ConfigError, load_config
from .pipeline import STAGES, StageFailure, run_pipeline
from .plots import MissingArtifactError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_MISSING = 4


def build_parser():
    parser = argparse.ArgumentParser(prog="amcl", description="Adversarial masking contrastive learning pipeline.")
    parser.add_argument("stage", choices=STAGES + ("all",), help="stage to run, or 'all' for the full pipeline")
    parser.add_argument("--config", help="INI-style config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--output-dir", help="output directory (takes precedence over AMCL_OUTPUT_DIR)")
    parser.add_argument("--resume", action="store_true",
                        help="skip stages whose manifest records match the current config and files")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    overrides = list(args.overrides)
    try:
        config = load_config(args.config, overrides)
        if args.output_dir:
            config.values["experiment"]["output_dir"] = args.output_dir
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    stages = STAGES if args.stage == "all" else (args.stage,)
    try:
        run_pipeline(config, stages, resume=args.resume)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
