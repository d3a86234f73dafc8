"""Exporter command line: `export` writes an SNFX file from an image folder,
`verify` re-checks an existing file and feeds it through the engine pipeline.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportConfig, export
from .verify import verify_export

log = logging.getLogger("snfx_exporter")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snfx-export", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="extract features from a pretrained (or random) DeiT")
    p.add_argument("--model", choices=["tiny", "small", "base"], default="tiny")
    p.add_argument("--layer", type=int, default=9)
    p.add_argument("--data", required=True, help="ImageFolder-style dataset root")
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--device", default="cpu")
    p.add_argument("--checkpoint", default=None, help="local state-dict path with pretrained weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None)

    q = sub.add_parser("verify", help="validate an SNFX file and run the engine pipeline on it")
    q.add_argument("--input", required=True)
    q.add_argument("--vocab-size", type=int, default=8)
    q.add_argument("--no-engine", action="store_true", help="skip the engine CLI round trip")
    return parser


def dispatch(argv) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "export":
            config = ExportConfig(
                model=args.model,
                layer_index=args.layer,
                data_root=args.data,
                image_size=args.image_size,
                out=args.out,
                batch_size=args.batch,
                device=args.device,
                checkpoint=args.checkpoint,
                seed=args.seed,
                limit=args.limit,
            )
            header = export(config)
            print(
                f"exported {header.record_count} records: n={header.n} zeta={header.zeta} "
                f"d={header.d} layer={header.layer_index}"
            )
            return 0
        report = verify_export(args.input, run_engine=not args.no_engine, vocab_size=args.vocab_size)
        print(report.format())
        return 0 if report.passed else 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
