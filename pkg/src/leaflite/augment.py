"""Seeded runtime augmentation: shift, rotation, shear, horizontal flip.

Each transform fires independently with a configurable probability and
draws its parameters uniformly from the configured ranges. Geometric
transforms use inverse mapping with bilinear sampling; samples falling
outside the source are filled with the nearest edge pixels, so constant
images are fixed points of every transform. The random plan is drawn with
a fixed variate count, which keeps streams splittable per (image, epoch)
without the draw order depending on which transforms fire.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    shift_range: float = 0.2        # fraction of side, drawn from [0, shift_range]
    rotation_range: float = 20.0    # degrees, drawn from [-range, range]
    shear_range: float = 0.2        # shear factor, drawn from [0, shear_range]
    hflip_enabled: bool = True
    per_transform_probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.per_transform_probability <= 1.0:
            raise ValueError("per_transform_probability must be in [0, 1]")
        if self.shift_range < 0 or self.shear_range < 0 or self.rotation_range < 0:
            raise ValueError("ranges must be non-negative")


@dataclass(frozen=True)
class AugmentPlan:
    """Resolved outcome of one random draw; application order is
    shift -> rotate -> shear -> hflip."""

    do_shift: bool
    dx_frac: float
    dy_frac: float
    do_rotate: bool
    degrees: float
    do_shear: bool
    shear_factor: float
    do_hflip: bool


def _sample_bilinear(img: np.ndarray, src_x: np.ndarray, src_y: np.ndarray) -> np.ndarray:
    """Sample img at fractional (src_x, src_y), clamping to the edges."""
    h, w = img.shape[:2]
    src_x = np.clip(src_x, 0.0, w - 1.0)
    src_y = np.clip(src_y, 0.0, h - 1.0)
    x0 = np.floor(src_x).astype(np.intp)
    y0 = np.floor(src_y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (src_x - x0)[..., None]
    fy = (src_y - y0)[..., None]
    img = img.astype(np.float64)
    val = (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )
    return np.clip(np.rint(val), 0, 255).astype(np.uint8)


def shift(img: np.ndarray, dx_frac: float, dy_frac: float) -> np.ndarray:
    """Translate content by round(frac * side) pixels; positive moves
    right/down. Vacated regions replicate the nearest edge pixels."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    dx = int(round(dx_frac * w))
    dy = int(round(dy_frac * h))
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[ys][:, xs]


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counterclockwise about the image center, bilinear sampling."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_x = cx + cos_t * xx + sin_t * yy
    src_y = cy - sin_t * xx + cos_t * yy
    return _sample_bilinear(img, src_x, src_y)


def shear(img: np.ndarray, factor: float) -> np.ndarray:
    """Horizontal shear anchored at the bottom row: a pixel moves right by
    factor times its distance from the bottom."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_x = xx - factor * (h - 1 - yy)
    return _sample_bilinear(img, src_x.astype(np.float64), yy.astype(np.float64))


def hflip(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.uint8)[:, ::-1]


def draw_plan(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentPlan:
    """Draw one augmentation plan; always consumes the same variate count."""
    gates = rng.random(4) < cfg.per_transform_probability
    dx, dy = rng.uniform(0.0, cfg.shift_range, size=2)
    degrees = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    factor = rng.uniform(0.0, cfg.shear_range)
    return AugmentPlan(
        do_shift=bool(gates[0]),
        dx_frac=float(dx),
        dy_frac=float(dy),
        do_rotate=bool(gates[1]),
        degrees=float(degrees),
        do_shear=bool(gates[2]),
        shear_factor=float(factor),
        do_hflip=bool(gates[3]) and cfg.hflip_enabled,
    )


def apply_plan(img: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    if plan.do_shift:
        img = shift(img, plan.dx_frac, plan.dy_frac)
    if plan.do_rotate:
        img = rotate(img, plan.degrees)
    if plan.do_shear:
        img = shear(img, plan.shear_factor)
    if plan.do_hflip:
        img = hflip(img)
    return img


def random_augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return apply_plan(img, draw_plan(cfg, rng))


def stream_for(base_seed: int, *scope: int) -> np.random.Generator:
    """Independent deterministic stream for a scope such as
    (split_tag, epoch, image_index)."""
    words = [int(s) & 0xFFFF_FFFF_FFFF_FFFF for s in (base_seed, *scope)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
