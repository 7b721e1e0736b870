"""Grayscale image container, PGM reading/writing, and geometric ops."""

from __future__ import annotations

from pathlib import Path

import numpy as np

# Rec. 601 luma weights, in (r, g, b) order.  They sum to 1, so a grayscale
# conversion of identical planes is the identity up to rounding.
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

_WHITESPACE = b" \t\n\r\x0b\x0c"


class PgmError(ValueError):
    """Raised for files that are not readable as PGM."""


class Image:
    """Single-channel raster with intensities in [0, 1].

    Pixels are a 2-D float array indexed [row, column].  Instances are
    treated as immutable: every operation returns a new image and callers
    must not write through `pixels`.
    """

    __slots__ = ("pixels",)

    def __init__(self, pixels: np.ndarray):
        px = np.asarray(pixels)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"image data must be a non-empty 2-D array, got shape {px.shape}")
        if not np.issubdtype(px.dtype, np.floating):
            px = px.astype(np.float64)
        lo, hi = float(px.min()), float(px.max())
        if not (0.0 <= lo and hi <= 1.0):
            raise ValueError(f"intensities must lie in [0, 1], got range [{lo}, {hi}]")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Image({self.width}x{self.height})"


def _next_token(data: bytes, pos: int, context: str) -> tuple[bytes, int]:
    """Return the next header/sample token, skipping whitespace and # comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c in _WHITESPACE:
            pos += 1
        elif c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    if pos >= n:
        raise PgmError(f"truncated PGM file: ran out of bytes while reading {context}")
    start = pos
    while pos < n and data[pos : pos + 1] not in _WHITESPACE:
        pos += 1
    return data[start:pos], pos


def _parse_int(token: bytes, context: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise PgmError(f"malformed PGM header: expected integer {context}, got {token!r}") from None


def load_pgm(path: str | Path) -> Image:
    """Read a binary (P5) or ASCII (P2) PGM file.

    Intensities are scaled by the file's maxval so the result lies in
    [0, 1].  Binary files with maxval above 255 use two big-endian bytes
    per sample, as the format prescribes.
    """
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise PgmError(f"unsupported PGM magic {magic!r}: only P5 and P2 are readable")
    pos = 2
    width, pos = _next_token(data, pos, "width")
    height, pos = _next_token(data, pos, "height")
    maxval, pos = _next_token(data, pos, "maxval")
    width = _parse_int(width, "width")
    height = _parse_int(height, "height")
    maxval = _parse_int(maxval, "maxval")
    if width <= 0 or height <= 0:
        raise PgmError(f"malformed PGM header: non-positive dimensions {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise PgmError(f"malformed PGM header: maxval {maxval} outside [1, 65535]")

    count = width * height
    if magic == b"P5":
        # Exactly one whitespace byte separates the header from the raster.
        if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
            raise PgmError("malformed PGM header: missing separator before binary raster")
        pos += 1
        dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
        need = count * dtype.itemsize
        raster = data[pos : pos + need]
        if len(raster) < need:
            raise PgmError(
                f"truncated PGM pixel data: need {need} bytes, found {len(raster)}"
            )
        values = np.frombuffer(raster, dtype=dtype).astype(np.float64)
    else:
        samples = np.empty(count, dtype=np.float64)
        for i in range(count):
            token, pos = _next_token(data, pos, f"pixel {i}")
            samples[i] = _parse_int(token, f"for pixel {i}")
        values = samples
    if values.max(initial=0.0) > maxval:
        raise PgmError(f"malformed PGM pixel data: sample exceeds maxval {maxval}")
    return Image((values / maxval).reshape(height, width))


def save_pgm(image: Image, path: str | Path, maxval: int = 255) -> None:
    """Write a binary (P5) PGM file.

    Intensities are quantised with round-half-up, so 0.5 at maxval 255
    stores as 128.  Only the two common maxvals are supported.
    """
    if maxval not in (255, 65535):
        raise ValueError(f"maxval must be 255 or 65535, got {maxval}")
    dtype = np.dtype(np.uint8) if maxval == 255 else np.dtype(">u2")
    quantised = np.floor(image.pixels * maxval + 0.5).astype(dtype)
    header = f"P5\n{image.width} {image.height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + quantised.tobytes())


def quantize(image: Image, maxval: int = 255) -> Image:
    """Snap intensities to the grid a PGM write/read round-trip would produce."""
    levels = np.floor(image.pixels * maxval + 0.5)
    return Image(levels / maxval)


def resize_bilinear(image: Image, out_width: int, out_height: int) -> Image:
    """Resample with bilinear interpolation and pixel-center alignment.

    Source coordinates are clamped at the borders, so the output range is a
    convex combination of input intensities and stays in [0, 1].
    """
    if out_width < 1 or out_height < 1:
        raise ValueError(f"target size must be positive, got {out_width}x{out_height}")
    src = image.pixels
    h, w = src.shape
    if (out_width, out_height) == (w, h):
        return Image(src.copy())

    x = (np.arange(out_width, dtype=np.float64) + 0.5) * (w / out_width) - 0.5
    y = (np.arange(out_height, dtype=np.float64) + 0.5) * (h / out_height) - 0.5
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0

    top = src[np.ix_(y0, x0)] * (1.0 - fx) + src[np.ix_(y0, x1)] * fx
    bottom = src[np.ix_(y1, x0)] * (1.0 - fx) + src[np.ix_(y1, x1)] * fx
    out = top * (1.0 - fy)[:, None] + bottom * fy[:, None]
    return Image(np.clip(out, 0.0, 1.0).astype(src.dtype, copy=False))


def to_grayscale(r: Image, g: Image, b: Image) -> Image:
    """Combine three color planes into one luma image with Rec. 601 weights."""
    if not (r.shape == g.shape == b.shape):
        raise ValueError(
            f"color planes disagree in size: {r.shape}, {g.shape}, {b.shape}"
        )
    wr, wg, wb = GRAY_WEIGHTS
    out = wr * r.pixels + wg * g.pixels + wb * b.pixels
    return Image(np.clip(out, 0.0, 1.0))


def crop(image: Image, x: int, y: int, width: int, height: int) -> Image:
    """Cut the axis-aligned window whose top-left corner is (x, y)."""
    if x < 0 or y < 0 or width < 1 or height < 1:
        raise ValueError("crop window must be positive and inside the image")
    if x + width > image.width or y + height > image.height:
        raise ValueError(
            f"crop window {width}x{height}+{x}+{y} exceeds image {image.width}x{image.height}"
        )
    return Image(image.pixels[y : y + height, x : x + width].copy())
