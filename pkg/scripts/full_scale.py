#!/usr/bin/env python3
"""Full-scale recipe on the PlantVillage tomato subset (not run in CI).

Requirements:
  * the tomato image corpus as a directory per class (10 classes,
    18160 images) -- supply the path, this repo does not download data;
  * real ImageNet backbone weights: `leaflite-export <dir> --weights
    imagenet` on a machine with network access.

Protocol (published defaults throughout): CLAHE-enhance the whole corpus,
60/20/20 stratified split, train the head with batch 16 / Adam 1e-5 /
early stopping, then evaluate 100 times on the augmented test split.
Pass criterion for the recipe: mean accuracy >= 98.5% over the 100 runs.
"""

import argparse
import sys
from pathlib import Path

from leaflite.cli import main as leaflite_main
from leaflite import dataset as D


def sh(args):
    print("+ leaflite " + " ".join(args))
    code = leaflite_main(args)
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("corpus", help="PlantVillage tomato root (10 class directories)")
    parser.add_argument("backbone", help="ImageNet backbone.lwts from leaflite-export")
    parser.add_argument("--workdir", default="full-scale-run")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--runs", type=int, default=100)
    args = parser.parse_args()

    index = D.scan_dataset(args.corpus)
    counts = D.class_distribution(index)
    print(f"corpus: {len(index)} images, {len(index.class_names)} classes")
    for name, n in counts.items():
        print(f"  {name}: {n}")
    if len(index.class_names) != 10:
        sys.exit("expected the 10-class tomato subset")
    if len(index) != 18160:
        print(f"warning: expected 18160 images, found {len(index)}")

    base = Path(args.workdir)
    enhanced = base / "enhanced"
    sh(["enhance", args.corpus, str(enhanced), "--run-dir", str(base / "run-enhance")])
    manifest = base / "manifest.tsv"
    sh(["split", str(enhanced), "--seed", str(args.seed),
        "--manifest", str(manifest), "--run-dir", str(base / "run-split")])
    sh(["train", "--corpus", str(enhanced), "--manifest", str(manifest),
        "--backbone", args.backbone, "--seed", str(args.seed),
        "--run-dir", str(base / "run-train")])
    bundle = base / "run-train" / "bundle"
    sh(["eval", "--bundle", str(bundle), "--corpus", str(enhanced),
        "--manifest", str(manifest), "--runs", str(args.runs),
        "--base-seed", str(args.seed), "--run-dir", str(base / "run-eval")])

    report = (base / "run-eval" / "report.txt").read_text()
    mean_line = next(l for l in report.splitlines() if l.startswith("accuracy_mean="))
    mean_acc = float(mean_line.split("=")[1])
    print(f"\nmean accuracy over {args.runs} augmented runs: {mean_acc:.4f}")
    if mean_acc >= 0.985:
        print("PASS: mean accuracy >= 98.5%")
    else:
        sys.exit("FAIL: mean accuracy below 98.5%")


if __name__ == "__main__":
    main()
