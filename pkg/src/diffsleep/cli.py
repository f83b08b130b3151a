"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, DataError, NumericalError
from .pipeline import STAGES, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("diffsleep")


def _dims(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffsleep",
        description="Sleep staging with scattering features, diffusion maps and a kernel SVM.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file (defaults apply when omitted)")
    common.add_argument(
        "--stage-override",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        help="override a config field, e.g. diffusion.t=0.5 (repeatable)",
    )
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker threads (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for stage in STAGES + ("all",):
        p = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage" if stage != "all" else "run every stage")
        if stage in ("export", "all"):
            p.add_argument("--dims", type=_dims, help="coordinates to export, e.g. 2,3,4 (default 2,3,4)")
            p.add_argument("--variant", help="single-0, single-1, concat or multiview (default: configured fusion)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    overrides = list(args.stage_override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    try:
        config = load_config(args.config, overrides)
        kwargs = {}
        if args.command in ("export", "all"):
            kwargs = {"dims": args.dims, "variant": args.variant}
        result = run_stage(args.command, config, **kwargs)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    if result is not None:
        for path in result if isinstance(result, list) else [result]:
            if hasattr(path, "is_file"):
                print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
