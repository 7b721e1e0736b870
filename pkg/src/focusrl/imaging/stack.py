"""Focal stacks: defocus-blurred frame sequences over a position grid."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from focusrl.focus import tenengrad
from focusrl.imaging.filters import defocus_blur
from focusrl.imaging.image import Image, load_pgm, save_pgm
from focusrl.imaging.scene import Scene

MANIFEST_NAME = "manifest.json"
FRAME_MAXVAL = 255

# Tolerance for deciding that (z_max - z_min) / spacing is an integer; the
# division itself costs a few ulp even for exact grids like 39.0 / 0.3.
_GRID_RTOL = 1e-6


@dataclass(frozen=True)
class FocalStack:
    """Frames of one scene at evenly spaced focus positions.

    `focus_values` holds the raw Tenengrad score of every generated frame
    and `focus_max` its maximum, so consumers can normalise without
    touching pixels again.  Saving quantises frames to 8 bits but keeps the
    full-precision curve in the manifest; `load_stack` restores the
    manifest curve rather than re-measuring the quantised frames.
    """

    view_id: str
    seed: int
    z_min: float
    z_max: float
    spacing: float
    z_star: float
    blur_gain: float
    positions: np.ndarray
    frames: list[Image]
    focus_values: np.ndarray
    focus_max: float

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def sharpest_index(self) -> int:
        return int(np.abs(self.positions - self.z_star).argmin())


def position_count(z_min: float, z_max: float, spacing: float) -> int:
    """Number of grid positions, rejecting ranges that do not divide evenly."""
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    if z_max <= z_min:
        raise ValueError(f"need z_min < z_max, got [{z_min}, {z_max}]")
    ratio = (z_max - z_min) / spacing
    steps = round(ratio)
    if steps < 1 or abs(ratio - steps) > _GRID_RTOL * max(1.0, abs(ratio)):
        raise ValueError(
            f"range [{z_min}, {z_max}] is not an integer number of {spacing} steps"
        )
    return steps + 1


def generate_stack(
    scene: Scene,
    z_min: float,
    z_max: float,
    spacing: float,
    z_star: float,
    blur_gain: float = 0.35,
    view_id: str | None = None,
) -> FocalStack:
    """Blur a scene into a focal stack.

    Frame k sits at position z_min + k * spacing and is blurred with
    sigma = blur_gain * |position - z_star|, so the frame nearest z_star is
    sharpest and sharpness decays away from it on both sides.
    """
    n = position_count(z_min, z_max, spacing)
    if not z_min < z_star < z_max:
        raise ValueError(f"z_star {z_star} must lie strictly inside [{z_min}, {z_max}]")
    if blur_gain < 0:
        raise ValueError(f"blur_gain must be non-negative, got {blur_gain}")
    positions = z_min + spacing * np.arange(n, dtype=np.float64)
    frames = [
        defocus_blur(scene.content, blur_gain * abs(float(z) - z_star)) for z in positions
    ]
    focus_values = np.array([tenengrad(frame) for frame in frames])
    return FocalStack(
        view_id=view_id if view_id is not None else f"scene{scene.seed}",
        seed=scene.seed,
        z_min=float(z_min),
        z_max=float(z_max),
        spacing=float(spacing),
        z_star=float(z_star),
        blur_gain=float(blur_gain),
        positions=positions,
        frames=frames,
        focus_values=focus_values,
        focus_max=float(focus_values.max()),
    )


def _frame_name(index: int) -> str:
    return f"frame_{index:04d}.pgm"


def save_stack(stack: FocalStack, directory: str | Path) -> None:
    """Write frames as PGM plus a JSON manifest into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(stack.frames):
        save_pgm(frame, directory / _frame_name(i), maxval=FRAME_MAXVAL)
    manifest = {
        "view_id": stack.view_id,
        "seed": stack.seed,
        "z_min": stack.z_min,
        "z_max": stack.z_max,
        "spacing": stack.spacing,
        "z_star": stack.z_star,
        "blur_gain": stack.blur_gain,
        "focus_max": stack.focus_max,
        "focus_curve": [float(v) for v in stack.focus_values],
    }
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_stack(directory: str | Path) -> FocalStack:
    """Read a stack directory written by `save_stack`."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no stack manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    n = position_count(manifest["z_min"], manifest["z_max"], manifest["spacing"])
    focus_values = np.asarray(manifest["focus_curve"], dtype=np.float64)
    if len(focus_values) != n:
        raise ValueError(
            f"manifest curve has {len(focus_values)} entries for {n} positions"
        )
    frames = []
    for i in range(n):
        frame_path = directory / _frame_name(i)
        if not frame_path.is_file():
            raise FileNotFoundError(f"stack at {directory} is missing {frame_path.name}")
        frames.append(load_pgm(frame_path))
    positions = manifest["z_min"] + manifest["spacing"] * np.arange(n, dtype=np.float64)
    return FocalStack(
        view_id=manifest["view_id"],
        seed=int(manifest["seed"]),
        z_min=float(manifest["z_min"]),
        z_max=float(manifest["z_max"]),
        spacing=float(manifest["spacing"]),
        z_star=float(manifest["z_star"]),
        blur_gain=float(manifest["blur_gain"]),
        positions=positions,
        frames=frames,
        focus_values=focus_values,
        focus_max=float(manifest["focus_max"]),
    )
