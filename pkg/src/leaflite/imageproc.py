"""Color conversion, CLAHE enhancement, and network-input preparation.

Images are uint8 numpy arrays of shape (height, width, 3), interleaved RGB.
Lightness is enhanced in Hunter Lab space: sRGB is gamma-decoded
(IEC 61966-2-1), projected to CIE XYZ under D65/2°, then

    L = 100 * sqrt(Y/Yn)
    a = Ka * (X/Xn - Y/Yn) / sqrt(Y/Yn)      Ka = 172.30
    b = Kb * (Y/Yn - Z/Zn) / sqrt(Y/Yn)      Kb = 67.20

with a = b = 0 at Y = 0. Only L is equalized; a and b pass through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .errors import InputError

KA = 172.30
KB = 67.20

# sRGB (linear) -> XYZ, D65/2 degree observer
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE = _RGB_TO_XYZ.sum(axis=1)  # XYZ of sRGB white: (Xn, Yn, Zn)


@dataclass
class LabImage:
    L: np.ndarray  # (H, W) float32, range [0, 100]
    a: np.ndarray
    b: np.ndarray

    @property
    def height(self):
        return self.L.shape[0]

    @property
    def width(self):
        return self.L.shape[1]


@dataclass(frozen=True)
class ClaheParams:
    tiles_x: int = 7
    tiles_y: int = 7
    clip_beta: float = 3.0
    bins: int = 256

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ValueError("tile counts must be >= 1")
        if self.clip_beta <= 0:
            raise ValueError("clip_beta must be positive")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")


def load_image(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc


def save_image(img: np.ndarray, path) -> None:
    PILImage.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def _srgb_decode(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_encode(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def rgb_to_hunter_lab(img: np.ndarray) -> LabImage:
    rgb = np.asarray(img, dtype=np.float64) / 255.0
    xyz = _srgb_decode(rgb) @ _RGB_TO_XYZ.T
    x, y, z = (xyz[..., i] / _WHITE[i] for i in range(3))
    sq = np.sqrt(y)
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(sq > 0, KA * (x - y) / np.where(sq > 0, sq, 1.0), 0.0)
        b = np.where(sq > 0, KB * (y - z) / np.where(sq > 0, sq, 1.0), 0.0)
    return LabImage(
        L=(100.0 * sq).astype(np.float32),
        a=a.astype(np.float32),
        b=b.astype(np.float32),
    )


def hunter_lab_to_rgb(lab: LabImage) -> np.ndarray:
    sq = np.asarray(lab.L, dtype=np.float64) / 100.0
    y = sq * sq
    x = y + np.asarray(lab.a, np.float64) * sq / KA
    z = y - np.asarray(lab.b, np.float64) * sq / KB
    xyz = np.stack([x * _WHITE[0], y * _WHITE[1], z * _WHITE[2]], axis=-1)
    srgb = _srgb_encode(xyz @ _XYZ_TO_RGB.T)
    return np.clip(np.rint(srgb * 255.0), 0, 255).astype(np.uint8)


def _partition(total: int, parts: int) -> np.ndarray:
    """Start offsets (parts+1,) of a split into parts differing by <= 1."""
    sizes = np.full(parts, total // parts)
    sizes[: total % parts] += 1
    return np.concatenate([[0], np.cumsum(sizes)])


def clip_histogram(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """Clip bins at clip_limit and spread the excess uniformly in one pass.

    The uniform share raises the effective ceiling to
    clip_limit + excess/bins; the total count is preserved exactly.
    """
    hist = np.asarray(hist, dtype=np.float64)
    excess = np.clip(hist - clip_limit, 0.0, None).sum()
    return np.minimum(hist, clip_limit) + excess / hist.size


def _bin_positions(L, bins):
    t = np.asarray(L, np.float64) / 100.0 * (bins - 1)
    t = np.clip(t, 0.0, bins - 1)
    k0 = np.floor(t).astype(np.intp)
    frac = t - k0
    k1 = np.minimum(k0 + 1, bins - 1)
    return k0, k1, frac


def clahe_tile_mappings(L: np.ndarray, params: ClaheParams):
    """Per-tile intensity mappings.

    Returns (maps, row_edges, col_edges): maps[q, p] is the output L value
    per histogram bin for tile (q, p). The mapping is the clipped-histogram
    CDF evaluated at bin midpoints, rescaled so that a flat histogram maps
    every bin center exactly to itself; a uniform tile is therefore a
    fixed point up to quantization.
    """
    h, w = L.shape
    q, p, bins = params.tiles_y, params.tiles_x, params.bins
    row_edges = _partition(h, q)
    col_edges = _partition(w, p)
    idx = np.rint(np.asarray(L, np.float64) / 100.0 * (bins - 1)).astype(np.intp)
    np.clip(idx, 0, bins - 1, out=idx)

    maps = np.empty((q, p, bins))
    for i in range(q):
        for j in range(p):
            tile = idx[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]]
            npix = tile.size
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            hist = clip_histogram(hist, params.clip_beta * npix / bins)
            cdf = np.cumsum(hist)
            midpoint = (cdf - 0.5 * hist) / npix
            maps[i, j] = 100.0 * np.clip((midpoint * bins - 0.5) / (bins - 1), 0.0, 1.0)
    return maps, row_edges, col_edges


def clahe(img: np.ndarray, params: ClaheParams = ClaheParams()) -> np.ndarray:
    """Contrast-limited adaptive equalization of the Hunter Lab L channel.

    The image is split into tiles_y x tiles_x contextual regions; each
    pixel is remapped by bilinear interpolation between the mappings of
    the four nearest tile centers (edge pixels reuse the border tiles).
    """
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    if w < params.tiles_x or h < params.tiles_y:
        raise ValueError(
            f"image {w}x{h} smaller than the {params.tiles_x}x{params.tiles_y} tile grid"
        )
    lab = rgb_to_hunter_lab(img)
    maps, row_edges, col_edges = clahe_tile_mappings(lab.L, params)
    q, p, bins = maps.shape

    centers_y = (row_edges[:-1] + row_edges[1:] - 1) / 2.0
    centers_x = (col_edges[:-1] + col_edges[1:] - 1) / 2.0
    fy = np.interp(np.arange(h), centers_y, np.arange(q))
    fx = np.interp(np.arange(w), centers_x, np.arange(p))
    i0 = np.floor(fy).astype(np.intp)
    j0 = np.floor(fx).astype(np.intp)
    wy = (fy - i0)[:, None]
    wx = (fx - j0)[None, :]
    i1 = np.minimum(i0 + 1, q - 1)
    j1 = np.minimum(j0 + 1, p - 1)

    k0, k1, frac = _bin_positions(lab.L, bins)

    def eval_maps(ti, tj):
        rows, cols = ti[:, None], tj[None, :]
        return maps[rows, cols, k0] * (1.0 - frac) + maps[rows, cols, k1] * frac

    out_l = (
        (1 - wy) * (1 - wx) * eval_maps(i0, j0)
        + (1 - wy) * wx * eval_maps(i0, j1)
        + wy * (1 - wx) * eval_maps(i1, j0)
        + wy * wx * eval_maps(i1, j1)
    )
    return hunter_lab_to_rgb(LabImage(out_l.astype(np.float32), lab.a, lab.b))


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-aligned centers and edge clamping."""
    arr = np.asarray(arr, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w = arr.shape[:2]
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0).astype(np.float32)[:, None, None]
    fx = (sx - x0).astype(np.float32)[None, :, None]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out[:, :, 0] if squeeze else out


def to_input_tensor(img: np.ndarray, side: int = 256) -> np.ndarray:
    """Resize to side x side and map [0,255] linearly onto [-1,1].

    Returns a (1, side, side, 3) float32 tensor.
    """
    resized = resize_bilinear(np.asarray(img, dtype=np.float32), side, side)
    t = resized / np.float32(127.5) - np.float32(1.0)
    return t.reshape(1, side, side, 3)
