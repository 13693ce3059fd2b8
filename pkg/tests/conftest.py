import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from leaflite.imageproc import save_image


def make_leaf_image(rng, side=96, background=128):
    """Synthetic leaf: textured bright disk on a flat gray background."""
    img = np.full((side, side, 3), background, dtype=np.uint8)
    yy, xx = np.mgrid[0:side, 0:side]
    cy, cx = side / 2, side / 2
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (side * 0.35) ** 2
    texture = rng.integers(60, 250, size=(side, side, 3), dtype=np.int64)
    texture[:, :, 0] //= 2  # green-dominant
    texture[:, :, 2] //= 2
    img[mask] = texture[mask].astype(np.uint8)
    return img, mask


def make_class_image(rng, class_id, side=96):
    """Class-separable synthetic samples: distinct dominant hue per class."""
    base = np.array(
        [(190, 40, 40), (40, 190, 40), (40, 40, 190), (190, 190, 40), (40, 190, 190)],
        dtype=np.int64,
    )[class_id % 5]
    noise = rng.integers(-30, 31, size=(side, side, 3))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def make_diseased_leaf(rng, class_id, side=96, background=128):
    """Leaf disk on a flat gray background; the class signal (leaf
    coloring) exists only inside the disk."""
    img = np.full((side, side, 3), background, dtype=np.uint8)
    yy, xx = np.mgrid[0:side, 0:side]
    cy = side / 2 + rng.integers(-6, 7)
    cx = side / 2 + rng.integers(-6, 7)
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (side * 0.35) ** 2
    base = [(200, 50, 40), (50, 190, 50), (60, 70, 210)][class_id]
    leaf = np.array(base, np.int64) + rng.integers(-35, 36, (side, side, 3))
    img[mask] = np.clip(leaf[mask], 0, 255).astype(np.uint8)
    return img, mask


@pytest.fixture(scope="session")
def synthetic_corpus(tmp_path_factory):
    """3 classes x 20 images, the desk-scale corpus for pipeline tests."""
    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(20240817)
    for class_id, name in enumerate(["alpha", "beta", "gamma"]):
        d = root / name
        d.mkdir()
        for i in range(20):
            save_image(make_class_image(rng, class_id), d / f"img{i:03d}.png")
    return root
