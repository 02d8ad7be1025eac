"""Uniform tile grids over an image, with optional overlap.

The same grid machinery serves two purposes: non-overlapping tiles for
bag-level classification and densely overlapping tiles (e.g. 75% overlap)
for attention-map inference. Border tiles are clamped so their far edge
coincides with the image edge; duplicate positions arising from the clamp
are removed.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TileGeom:
    """Half-open pixel box [x0, x1) x [y0, y1) attached to one view."""

    view_index: int
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate tile box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class GridSpec:
    image_width: int
    image_height: int
    tile_size: int
    overlap_fraction: float = 0.0

    def __post_init__(self):
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if not (0.0 <= self.overlap_fraction < 1.0):
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if self.stride < 1:
            raise ValueError("stride rounds to zero; decrease overlap_fraction")

    @property
    def stride(self) -> int:
        # round-half-up keeps the stride deterministic across platforms
        return int(self.tile_size * (1.0 - self.overlap_fraction) + 0.5)


def _axis_starts(extent: int, tile: int, stride: int) -> list[int]:
    """Tile start offsets along one axis, clamped to the image edge."""
    if extent <= tile:
        return [0]
    starts = list(range(0, extent - tile + 1, stride))
    last = extent - tile
    if starts[-1] != last:
        starts.append(last)
    return starts


def tile_grid(spec: GridSpec, view_index: int = 0) -> list[TileGeom]:
    """Enumerate grid tiles in row-major order.

    Tiles are tile_size square wherever the image permits; an image smaller
    than tile_size along an axis yields a single tile spanning that axis.
    The union of tiles covers every pixel.
    """
    w = min(spec.tile_size, spec.image_width)
    h = min(spec.tile_size, spec.image_height)
    xs = _axis_starts(spec.image_width, w, spec.stride)
    ys = _axis_starts(spec.image_height, h, spec.stride)
    return [
        TileGeom(view_index, x, y, x + w, y + h)
        for y in ys
        for x in xs
    ]


def coverage_count(spec: GridSpec, pixel: tuple[int, int]) -> int:
    """Number of grid tiles containing the pixel; >= 1 for in-bounds pixels."""
    x, y = pixel
    if not (0 <= x < spec.image_width and 0 <= y < spec.image_height):
        raise ValueError(f"pixel {pixel} outside {spec.image_width}x{spec.image_height} image")
    w = min(spec.tile_size, spec.image_width)
    h = min(spec.tile_size, spec.image_height)
    nx = sum(1 for s in _axis_starts(spec.image_width, w, spec.stride) if s <= x < s + w)
    ny = sum(1 for s in _axis_starts(spec.image_height, h, spec.stride) if s <= y < s + h)
    return nx * ny
