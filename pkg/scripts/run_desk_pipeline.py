#!/usr/bin/env python3
"""End-to-end desk-scale walkthrough on a synthetic corpus:
enhance -> split -> train -> eval -> analyze -> gradcam.

Uses the exporter's backbone when leaflite_export is installed (seeded
random mode offline, --imagenet for real zoo weights), otherwise falls
back to the engine's own seeded random backbone.
"""

import argparse
import subprocess
import sys
from pathlib import Path

from leaflite.cli import main as leaflite_main


def sh(args):
    print("+ leaflite " + " ".join(args))
    code = leaflite_main(args)
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("workdir", nargs="?", default="desk-run")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-epochs", type=int, default=3)
    parser.add_argument("--imagenet", action="store_true",
                        help="ask the exporter for real zoo weights (needs network)")
    args = parser.parse_args()

    base = Path(args.workdir)
    corpus = base / "corpus"
    base.mkdir(parents=True, exist_ok=True)

    subprocess.run(
        [sys.executable, str(Path(__file__).parent / "make_synthetic_corpus.py"),
         str(corpus), "--seed", str(args.seed)],
        check=True,
    )

    backbone = base / "backbone.lwts"
    if args.imagenet:
        from leaflite_export import export_backbone

        result = export_backbone(base / "export", weights="imagenet")
        backbone = result.weights_path
        print(f"backbone from exporter (imagenet): {backbone}")
    else:
        # engine-seeded backbone: BN statistics are calibrated, so even
        # random features separate the synthetic color classes
        sh(["init-backbone", "--seed", str(args.seed), "--out", str(backbone),
            "--run-dir", str(base / "run-init")])

    enhanced = base / "enhanced"
    sh(["enhance", str(corpus), str(enhanced), "--run-dir", str(base / "run-enhance")])
    manifest = base / "manifest.tsv"
    sh(["split", str(enhanced), "--seed", str(args.seed),
        "--manifest", str(manifest), "--run-dir", str(base / "run-split")])
    sh(["train", "--corpus", str(enhanced), "--manifest", str(manifest),
        "--backbone", str(backbone), "--batch-size", "8",
        "--max-epochs", str(args.max_epochs), "--initial-lr", "1e-3",
        "--seed", str(args.seed), "--run-dir", str(base / "run-train")])
    bundle = base / "run-train" / "bundle"
    sh(["eval", "--bundle", str(bundle), "--corpus", str(enhanced),
        "--manifest", str(manifest), "--runs", "5", "--batch-size", "8",
        "--base-seed", str(args.seed), "--run-dir", str(base / "run-eval")])
    sh(["analyze", "--bundle", str(bundle), "--run-dir", str(base / "run-analyze")])
    sample = next((enhanced).rglob("*.png"))
    sh(["gradcam", "--bundle", str(bundle), str(sample),
        "--run-dir", str(base / "run-gradcam")])
    sh(["augment-preview", str(sample), "--seed", str(args.seed),
        "--run-dir", str(base / "run-preview")])
    print(f"\nall artifacts under {base}/")


if __name__ == "__main__":
    main()
