"""Separable Gaussian blur used for defocus simulation and scene shaping."""

from __future__ import annotations

import math

import numpy as np

from focusrl.imaging.image import Image


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps with radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"kernel needs sigma > 0, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate1d(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    # Mirror padding without repeating the edge sample (reflect-101).
    radius = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="reflect")
    out = np.zeros_like(arr)
    for i, tap in enumerate(kernel):
        if axis == 0:
            out += tap * padded[i : i + arr.shape[0], :]
        else:
            out += tap * padded[:, i : i + arr.shape[1]]
    return out


def gaussian_blur_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Blur a 2-D array; sigma == 0 is the identity."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return arr.copy()
    kernel = gaussian_kernel(sigma)
    return _correlate1d(_correlate1d(arr, kernel, axis=0), kernel, axis=1)


def defocus_blur(image: Image, sigma: float) -> Image:
    """Apply Gaussian defocus of the given strength in pixels."""
    out = gaussian_blur_array(image.pixels, sigma)
    # The kernel sums to 1 only up to rounding; clip the stray ulps.
    return Image(np.clip(out, 0.0, 1.0))
