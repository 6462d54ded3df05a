"""Random affine augmentation (rotate / translate / scale) with bilinear resampling.

Every image is resampled once, directly onto the ``out_size x out_size``
target grid.  Output pixel ``p`` (x = column, y = row) is pulled from the
source through the inverse of::

    scale about centre  ->  rotate about centre  ->  translate by t * out_size

with pixel-centre alignment, so identity parameters give a plain bilinear
resize.  Source samples outside the image footprint are filled with -1 (black
after normalisation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FILL_VALUE = -1.0


def normalize(pixels: np.ndarray) -> np.ndarray:
    """u8 intensities -> float64 in [-1, 1]."""
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


@dataclass(frozen=True)
class AugmentConfig:
    target_size: int = 112
    max_rotation: float = 45.0
    max_translate: float = 0.15
    scale_range: tuple[float, float] = (0.85, 1.15)
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        if self.target_size < 1:
            raise ValueError("target_size must be >= 1")
        if not 0 <= self.max_rotation <= 180:
            raise ValueError("max_rotation must lie in [0, 180]")
        if not 0 <= self.max_translate < 1:
            raise ValueError("max_translate must lie in [0, 1)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < low <= high")


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0  # degrees, counter-clockwise on screen
    translate_x: float = 0.0  # fraction of output side
    translate_y: float = 0.0
    scale: float = 1.0


IDENTITY = AffineParams()


def sample_affine(cfg: AugmentConfig, rng: np.random.Generator) -> AffineParams:
    """Draw one parameter set; always consumes exactly four uniforms."""
    u = rng.random(4)
    lo, hi = cfg.scale_range
    return AffineParams(
        rotation=float(cfg.max_rotation * (2.0 * u[0] - 1.0)),
        translate_x=float(cfg.max_translate * (2.0 * u[1] - 1.0)),
        translate_y=float(cfg.max_translate * (2.0 * u[2] - 1.0)),
        scale=float(lo + (hi - lo) * u[3]),
    )


def source_coords(params: AffineParams, in_h: int, in_w: int, out_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Source (x, y) coordinate of every output pixel, each ``(out_size, out_size)``."""
    c_out = (out_size - 1) / 2.0
    idx = np.arange(out_size, dtype=np.float64)
    py, px = np.meshgrid(idx, idx, indexing="ij")
    # undo translation, then centre
    u = px - params.translate_x * out_size - c_out
    v = py - params.translate_y * out_size - c_out
    # inverse rotation; rows grow downward, so positive angles turn the image CCW on screen
    theta = math.radians(params.rotation)
    cos, sin = math.cos(theta), math.sin(theta)
    ru = (cos * u - sin * v) / params.scale
    rv = (sin * u + cos * v) / params.scale
    # output grid units -> source pixel units
    sx = ru * (in_w / out_size) + (in_w - 1) / 2.0
    sy = rv * (in_h / out_size) + (in_h - 1) / 2.0
    return sx, sy


def bilinear_sample(plane: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill: float = FILL_VALUE) -> np.ndarray:
    """Sample ``plane`` at float coordinates.

    Points inside the pixel footprint ``[-0.5, n-0.5]`` are interpolated with
    edge clamping; anything else gets ``fill``.
    """
    h, w = plane.shape
    inside = (sx >= -0.5) & (sx <= w - 0.5) & (sy >= -0.5) & (sy <= h - 0.5)
    x = np.clip(sx, 0.0, w - 1.0)
    y = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    # lerp form keeps constant fields exact
    top = plane[y0, x0] + fx * (plane[y0, x1] - plane[y0, x0])
    bot = plane[y1, x0] + fx * (plane[y1, x1] - plane[y1, x0])
    out = top + fy * (bot - top)
    return np.where(inside, out, fill)


def apply_affine(image: np.ndarray, params: AffineParams, out_size: int) -> np.ndarray:
    """Warp a u8 grayscale plane to a normalised ``out_size x out_size`` float plane."""
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("image must be a non-empty 2-D plane")
    plane = normalize(image)
    if params == IDENTITY and image.shape == (out_size, out_size):
        return plane
    sx, sy = source_coords(params, image.shape[0], image.shape[1], out_size)
    return bilinear_sample(plane, sx, sy)


def resize(image: np.ndarray, out_size: int) -> np.ndarray:
    """Deterministic resize only (validation / test path)."""
    return apply_affine(image, IDENTITY, out_size)


def augment_image(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator | None) -> np.ndarray:
    if not cfg.enabled or rng is None:
        return resize(image, cfg.target_size)
    return apply_affine(image, sample_affine(cfg, rng), cfg.target_size)
