"""Top-down perception: color/depth heightmaps and the clutter mask.

The renderer projects a scene orthographically onto a square pixel grid.
Pixel (row, col) covers the world point x = (col + 0.5) * meters_per_pixel,
y = (row + 0.5) * meters_per_pixel; the first array axis is the world y axis.
Rasterization evaluates the exact same containment predicate as point queries
on the scene, so depth values match ``top_height_at`` at pixel centers bit
for bit.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import scene as sc

TABLE_COLOR = (0.82, 0.80, 0.78)
DEPTH_UNIT = 1e-4  # 16-bit PGM depth encoding: one unit per 0.1 mm


class ShapeMismatchError(ValueError):
    """Array dimensions do not agree ("shape mismatch")."""


@dataclass(frozen=True)
class Heightmap:
    """Color (H, W, 3) in [0, 1] and depth (H, W) in meters above the table."""

    color: np.ndarray
    depth: np.ndarray
    meters_per_pixel: float

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class ClutterMap:
    """Binary height-discontinuity mask aligned with its source depth map."""

    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    shift_pixels: int
    axis: str
    threshold: float


@dataclass(frozen=True)
class PerceptionConfig:
    """Knobs for rendering and for building the action mask."""

    resolution: int = 224
    shift_pixels: int = 60
    axis: str = "x"
    threshold: float = 0.02
    # When > 0, the mask threshold is raised per step to this fraction of the
    # tallest surface, so only near-top discontinuities stay selectable in
    # stacked scenes.  0 keeps the static threshold.
    relative_threshold_fraction: float = 0.6
    signed: bool = False


def object_color(object_id: int) -> tuple[float, float, float]:
    """Deterministic per-object albedo (golden-angle hue walk)."""
    hue = (object_id * 0.618033988749895) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.65, 0.9)


def render_heightmaps(scene: sc.Scene, resolution: int = 224) -> Heightmap:
    """Orthographic top-down projection of the scene at ``resolution``."""
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    mpp = scene.workspace_side / resolution
    centers = (np.arange(resolution, dtype=np.float64) + 0.5) * mpp
    X, Y = np.meshgrid(centers, centers)  # X[row, col] = x of col; Y[row, col] = y of row

    depth = np.zeros((resolution, resolution), dtype=np.float64)
    color = np.empty((resolution, resolution, 3), dtype=np.float64)
    color[:] = TABLE_COLOR

    for obj in sorted(scene.objects, key=lambda o: (o.top, o.id)):
        covered = sc.contains(obj, X, Y)
        depth[covered] = obj.top
        color[covered] = object_color(obj.id)
    return Heightmap(color, depth, mpp)


def clutter_map(
    heightmap: Heightmap,
    shift_pixels: int = 60,
    axis: str = "x",
    threshold: float = 0.02,
    signed: bool = False,
) -> ClutterMap:
    """Mark pixels whose depth differs enough from a shifted copy.

    The comparison reads the source ``shift_pixels`` earlier along ``axis``
    (columns for "x", rows for "y"); out-of-bounds sources read as the table
    plane (depth 0).
    """
    depth = heightmap.depth
    extent = depth.shape[1] if axis == "x" else depth.shape[0]
    if axis not in ("x", "y"):
        raise ValueError(f"unknown axis {axis!r}")
    if not (0 < shift_pixels < extent):
        raise ValueError(f"invalid shift {shift_pixels} for extent {extent}")

    shifted = np.zeros_like(depth)
    if axis == "x":
        shifted[:, shift_pixels:] = depth[:, :-shift_pixels]
    else:
        shifted[shift_pixels:, :] = depth[:-shift_pixels, :]
    diff = depth - shifted
    if signed:
        mask = (diff >= threshold).astype(np.uint8)
    else:
        mask = (np.abs(diff) >= threshold).astype(np.uint8)
    return ClutterMap(mask, shift_pixels, axis, threshold)


def full_mask(heightmap: Heightmap) -> ClutterMap:
    """All-ones mask (used when the height-sensitive policy is disabled)."""
    return ClutterMap(np.ones_like(heightmap.depth, dtype=np.uint8), 0, "x", 0.0)


def action_mask(heightmap: Heightmap, percept: PerceptionConfig, height_policy: bool) -> ClutterMap:
    """Build the selection mask for one decision.

    With the height policy on, the threshold is raised toward the tallest
    surface so lower tiers of stacked scenes drop out of the mask until the
    tops above them are cleared.
    """
    if not height_policy:
        return full_mask(heightmap)
    threshold = percept.threshold
    if percept.relative_threshold_fraction > 0:
        threshold = max(
            threshold, percept.relative_threshold_fraction * float(heightmap.depth.max())
        )
    shift = min(percept.shift_pixels, heightmap.width - 1) if percept.axis == "x" else min(
        percept.shift_pixels, heightmap.height - 1
    )
    return clutter_map(heightmap, shift, percept.axis, threshold, percept.signed)


def suction_height(heightmap: Heightmap, row: int, col: int) -> float:
    """Depth value at a pixel: the cup descent target for that action."""
    if not (0 <= row < heightmap.height and 0 <= col < heightmap.width):
        raise sc.OutOfBoundsError(f"pixel ({row}, {col}) out of bounds")
    return float(heightmap.depth[row, col])


def occupied_object_estimate(heightmap: Heightmap, min_height: float) -> int:
    """Count 4-connected components of pixels at least ``min_height`` tall.

    Touching objects of equal height merge into one component; the scene's
    ground-truth object count stays available when exactness matters.
    """
    if min_height <= 0:
        raise ValueError("min_height must be positive")
    occupied = heightmap.depth >= min_height
    seen = np.zeros_like(occupied, dtype=bool)
    h, w = occupied.shape
    count = 0
    for i in range(h):
        for j in range(w):
            if not occupied[i, j] or seen[i, j]:
                continue
            count += 1
            stack = [(i, j)]
            seen[i, j] = True
            while stack:
                r, c = stack.pop()
                for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= nr < h and 0 <= nc < w and occupied[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
    return count


def pixel_to_world(row: int, col: int, meters_per_pixel: float) -> tuple[float, float]:
    """World (x, y) of a pixel center; x follows columns, y follows rows."""
    return (col + 0.5) * meters_per_pixel, (row + 0.5) * meters_per_pixel


def world_to_pixel(x: float, y: float, meters_per_pixel: float, resolution: int) -> tuple[int, int]:
    """Pixel (row, col) whose cell covers the world point."""
    col = min(resolution - 1, max(0, int(x / meters_per_pixel)))
    row = min(resolution - 1, max(0, int(y / meters_per_pixel)))
    return row, col


# ---------------------------------------------------------------------------
# Image dumps
# ---------------------------------------------------------------------------


def write_color_ppm(heightmap: Heightmap, path: str | Path) -> None:
    """8-bit binary PPM (P6) of the color heightmap."""
    data = np.clip(np.rint(heightmap.color * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{heightmap.width} {heightmap.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def write_depth_pgm(heightmap: Heightmap, path: str | Path) -> None:
    """16-bit binary PGM (P5) of depth, one unit per 0.1 mm, big-endian."""
    units = np.clip(np.rint(heightmap.depth / DEPTH_UNIT), 0, 65535).astype(">u2")
    header = f"P5\n{heightmap.width} {heightmap.height}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + units.tobytes())


def write_clutter_pgm(clutter: ClutterMap, path: str | Path) -> None:
    """8-bit binary PGM (P5) of the clutter mask, 0/255."""
    data = (clutter.mask * 255).astype(np.uint8)
    h, w = data.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def write_sidecar(heightmap: Heightmap, path: str | Path) -> None:
    doc = {
        "width": heightmap.width,
        "height": heightmap.height,
        "meters_per_pixel": heightmap.meters_per_pixel,
        "depth_unit_m": DEPTH_UNIT,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
