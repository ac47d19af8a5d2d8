"""Command-line front end: convert archives, verify emitted files.

Exit codes follow the harness convention: 0 success, 1 failed work
(conversion error, malformed file, checksum mismatch), 2 usage errors.
"""

import argparse
import json
import sys
from typing import List, Optional

from .convert import ConversionError, convert, verify
from .zvds import FormatError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medmnist-converter",
        description="Convert MedMNIST npz archives into ZVDS containers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_convert = sub.add_parser("convert", help="convert one split of an archive")
    p_convert.add_argument("archive", help="path to the npz archive")
    p_convert.add_argument("--split", required=True, choices=("train", "val", "test"))
    p_convert.add_argument("--out", required=True, help="output .zvds path")
    p_convert.add_argument(
        "--task",
        choices=("binary", "multiclass"),
        default=None,
        help="override the task kind inferred from the class count",
    )

    p_verify = sub.add_parser("verify", help="re-parse a container and check its checksum")
    p_verify.add_argument("path", help="path to a .zvds file")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "convert":
            manifest = convert(args.archive, args.split, args.out, task=args.task)
            print(json.dumps(manifest.to_json_dict(), indent=2))
            return 0
        return 0 if verify(args.path) else 1
    except (ConversionError, FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
