"""Command-line entry point: export --manifest M --out F.fvec [options]."""

from __future__ import annotations

import argparse
import sys

from .exporter import ExportError, ExportJob, export_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="burnsight-export",
        description="Write frozen CNN embeddings for every manifest image as FVEC.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="embed a manifest into a feature file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output .fvec path")
    p.add_argument("--backbone", default="resnet18")
    p.add_argument("--weights", default="pretrained",
                   help="pretrained, random, or a local .pth state dict")
    p.add_argument("--device", default="cpu")
    p.add_argument("--batch-size", type=int, default=16)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.batch_size < 1:
        parser.error("--batch-size must be >= 1")
    job = ExportJob(
        manifest_path=args.manifest,
        output_path=args.out,
        backbone=args.backbone,
        weights=args.weights,
        device=args.device,
        batch_size=args.batch_size,
    )
    try:
        sidecar = export_features(job)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{args.out} dim={sidecar['dim']} count={sidecar['count']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
