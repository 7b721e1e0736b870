"""Procedural test scenes: mid-gray canvas, random shapes, band-limited texture."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from focusrl.imaging.filters import gaussian_blur_array
from focusrl.imaging.image import Image

# Shape counts and the bandwidth of the finished content.  The final
# smoothing pass acts like a fixed lens/sensor blur: it bounds how fast the
# sharpness measure can fall off around best focus, which keeps the success
# band of a focal stack several positions wide.
N_ELLIPSES = 44
N_BARS = 12
TEXTURE_SIGMA = 2.5
TEXTURE_AMPLITUDE = 0.05
CONTENT_SMOOTHING_SIGMA = 1.3


@dataclass(frozen=True)
class Scene:
    """A rendered view plus the parameters that identify it."""

    seed: int
    width: int
    height: int
    content: Image


def render_scene(seed: int, width: int, height: int) -> Scene:
    """Draw a deterministic synthetic scene.

    The same (seed, width, height) always renders bit-identical content;
    different seeds give visibly different layouts.  The canvas is mid-gray
    with high-contrast ellipses and bars plus low-amplitude noise texture,
    so the in-focus image has strong gradients everywhere.
    """
    if width < 32 or height < 32:
        raise ValueError(f"scene must be at least 32x32, got {width}x{height}")
    rng = np.random.default_rng(seed)
    px = np.full((height, width), 0.5, dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    scale = min(width, height)

    for _ in range(N_ELLIPSES):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        a = rng.uniform(scale / 22, scale / 7)
        b = rng.uniform(scale / 22, scale / 7)
        theta = rng.uniform(0, np.pi)
        value = rng.uniform(0.03, 0.97)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        px[mask] = 0.3 * px[mask] + 0.7 * value

    for _ in range(N_BARS):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        half_len = rng.uniform(scale / 10, scale / 4)
        half_width = rng.uniform(scale / 40, scale / 14)
        theta = rng.uniform(0, np.pi)
        value = rng.uniform(0.03, 0.97)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        mask = (np.abs(u) <= half_len) & (np.abs(v) <= half_width)
        px[mask] = 0.3 * px[mask] + 0.7 * value

    texture = gaussian_blur_array(rng.standard_normal((height, width)), TEXTURE_SIGMA)
    px += texture * (TEXTURE_AMPLITUDE / texture.std())

    px = gaussian_blur_array(px, CONTENT_SMOOTHING_SIGMA)
    return Scene(seed, width, height, Image(np.clip(px, 0.0, 1.0)))
