#!/usr/bin/env python3
"""Generate a small directory-per-class synthetic leaf corpus for desk
runs: colored leaf disks on a gray background, one hue family per class."""

import argparse
from pathlib import Path

import numpy as np

from leaflite.imageproc import save_image

CLASS_BASES = {
    "bacterial_spot": (200, 50, 40),
    "healthy": (50, 190, 50),
    "mosaic_virus": (60, 70, 210),
    "leaf_mold": (190, 170, 40),
    "late_blight": (140, 60, 160),
}


def leaf_image(rng, base, side):
    img = np.full((side, side, 3), 128, dtype=np.uint8)
    yy, xx = np.mgrid[0:side, 0:side]
    cy = side / 2 + rng.integers(-side // 12, side // 12 + 1)
    cx = side / 2 + rng.integers(-side // 12, side // 12 + 1)
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (side * 0.35) ** 2
    leaf = np.array(base, np.int64) + rng.integers(-35, 36, (side, side, 3))
    img[mask] = np.clip(leaf[mask], 0, 255).astype(np.uint8)
    return img


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir")
    parser.add_argument("--classes", type=int, default=3, choices=range(1, 6))
    parser.add_argument("--per-class", type=int, default=20)
    parser.add_argument("--side", type=int, default=96)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    out = Path(args.out_dir)
    for name, base in list(CLASS_BASES.items())[: args.classes]:
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(args.per_class):
            save_image(leaf_image(rng, base, args.side), d / f"img{i:03d}.png")
    total = args.classes * args.per_class
    print(f"wrote {total} images ({args.classes} classes) under {out}")


if __name__ == "__main__":
    main()
