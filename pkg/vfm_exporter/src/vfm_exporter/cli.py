"""``vfm-export export --input DIR --output FILE --model NAME``"""

from __future__ import annotations

import argparse
import sys

from .backbones import ExporterError, available_models
from .export import RESIZE_POLICIES, ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfm-export",
        description="Write image-folder patch features in the HDITFEAT format.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="embed a folder of images into one feature file")
    p.add_argument("--input", required=True, help="image folder (searched recursively)")
    p.add_argument("--output", required=True, help="feature file to write")
    p.add_argument(
        "--model",
        default="mock-vit-s14",
        help=f"backbone name; one of {', '.join(available_models())}",
    )
    p.add_argument("--resize", default="crop", choices=RESIZE_POLICIES)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        input_dir=args.input, output=args.output, model=args.model, resize=args.resize
    )
    try:
        summary = export(job)
    except ExporterError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(
        f"wrote {summary.written} records ({summary.token_count} x {summary.dim} each) "
        f"to {summary.output} with {summary.model}"
        + (f"; skipped {summary.skipped}" if summary.skipped else "")
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
