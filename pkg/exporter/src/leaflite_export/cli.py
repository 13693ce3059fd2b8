import argparse
import sys

from .export import ExportError, export_backbone


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="leaflite-export",
        description="Export MobileNetV2 zoo weights and golden activation "
                    "fixtures into the engine's portable format.",
    )
    parser.add_argument("output_dir")
    parser.add_argument("--weights", choices=["imagenet", "random"], default="imagenet",
                        help="zoo weights, or deterministic seeded-random fallback "
                             "for offline environments [default: imagenet]")
    parser.add_argument("--seed", type=int, default=0,
                        help="weight seed for --weights random [default: 0]")
    parser.add_argument("--fixture-seed", type=int, default=0,
                        help="fixture input seed [default: 0]")
    args = parser.parse_args(argv)
    try:
        result = export_backbone(args.output_dir, weights=args.weights,
                                 seed=args.seed, fixture_seed=args.fixture_seed)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"source: {result.source}")
    for label, path in (("weights", result.weights_path), ("goldens", result.golden_path),
                        ("manifest", result.manifest_path), ("mapping", result.mapping_path)):
        print(f"{label}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
