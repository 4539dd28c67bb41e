"""Command-line surface: export | verify."""

from __future__ import annotations

import argparse
import sys

from .export import ExportConfig, export
from .verify import verify_bundle


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clip-feature-exporter",
        description="Produce and check MFFB feature bundles from image datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="encode a dataset into a feature bundle")
    p.add_argument("--dataset", required=True, help="image-folder root (class subdirectories)")
    p.add_argument("--out", required=True, help="output bundle path")
    p.add_argument("--weights", required=True, help="pretrained checkpoint path")
    p.add_argument("--bpe", help="tokenizer merges file (bpe_simple_vocab_16e6.txt.gz)")
    p.add_argument("--backbone", default="RN50", choices=["RN50", "RN101", "TINY"])
    p.add_argument("--prompts", default="single", choices=["single", "ensemble"])
    p.add_argument("--manifest", help="split manifest json (item_id -> support|test)")
    p.add_argument("--aug-views", type=int, default=0,
                   help="augmented views per support image (needs --manifest)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", help="check an exported bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--manifest", help="restrict the zero-shot smoke test to the test split")
    p.add_argument("--expected-zeroshot", type=float,
                   help="published zero-shot accuracy to band-check against (percent)")
    p.set_defaults(func=cmd_verify)
    return parser


def cmd_export(args) -> int:
    config = ExportConfig(
        dataset_path=args.dataset,
        output_path=args.out,
        weights_path=args.weights,
        backbone=args.backbone,
        prompt_mode=args.prompts,
        manifest_path=args.manifest,
        aug_views=args.aug_views,
        seed=args.seed,
        batch_size=args.batch_size,
        device=args.device,
        bpe_path=args.bpe,
    )
    data = export(config)
    print(f"wrote {args.out}: {len(data.item_ids)} items, {len(data.class_names)} classes")
    for lid, shape in sorted(data.geometry_layers.items()):
        print(f"  layer{lid}: {'x'.join(map(str, shape))}")
    print(f"  embedding dim: {data.dim}")
    return 0


def cmd_verify(args) -> int:
    report = verify_bundle(args.bundle, args.manifest, args.expected_zeroshot)
    for name, ok, detail in report.checks:
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
    if report.zero_shot_accuracy is not None:
        print(f"zero-shot accuracy (text branch): {100 * report.zero_shot_accuracy:.2f}")
    if not report.ok:
        print(f"failed checks: {', '.join(report.failed())}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # descriptive failure, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
