"""Command-line front end: one export kind per invocation."""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .export import (
    ExportJob,
    MODEL_SPECS,
    SALIENCY_METHODS,
    export_attention,
    export_influence,
    export_saliency,
    read_image_list,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsi-export",
        description="Emit influence, attention, or saliency score records for a ViT.",
    )
    parser.add_argument("--model", required=True, choices=sorted(MODEL_SPECS))
    parser.add_argument("--images", required=True,
                        help="text file of '<image-path> <label>' lines")
    parser.add_argument("--kind", required=True,
                        choices=["influence", "attention", "saliency"])
    parser.add_argument("--method", default="input-grad",
                        choices=sorted(SALIENCY_METHODS),
                        help="saliency backend (saliency kind only)")
    parser.add_argument("--checkpoint", help="state-dict path (ViT-B/16 models)")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--resume", action="store_true",
                        help="skip images already listed in the resume log")
    parser.add_argument("--out", required=True, help="output JSONL path")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExportJob(
            model=args.model, images=read_image_list(args.images), out=args.out,
            checkpoint=args.checkpoint, device=args.device,
            batch_size=args.batch_size, seed=args.seed, resume=args.resume,
        )
        if args.kind == "influence":
            written = export_influence(job)
        elif args.kind == "attention":
            written = export_attention(job)
        else:
            written = export_saliency(job, method=args.method)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {written} {args.kind} records to {args.out}", file=sys.stderr)
    return 0


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
