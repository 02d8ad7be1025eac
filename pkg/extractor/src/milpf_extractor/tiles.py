"""Foreground tile selection on a non-overlapping grid.

The grid matches the container consumer's conventions: square tiles,
stride equal to the tile size, a final tile clamped so its far edge meets
the image edge, and a single full-image tile along any axis smaller than
the tile size. A tile is kept when its fraction of foreground pixels
(intensity strictly above the threshold) strictly exceeds
min_foreground_fraction; set the fraction to 0 to keep any tile containing
a single foreground pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Box = tuple[int, int, int, int]  # x0, y0, x1, y1 (half-open)


@dataclass(frozen=True)
class ForegroundRule:
    intensity_threshold: float = 0.05
    min_foreground_fraction: float = 0.01

    def __post_init__(self):
        for value, name in ((self.intensity_threshold, "intensity_threshold"),
                            (self.min_foreground_fraction, "min_foreground_fraction")):
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


def _axis_starts(extent: int, tile: int) -> list[int]:
    if extent <= tile:
        return [0]
    starts = list(range(0, extent - tile + 1, tile))
    if starts[-1] != extent - tile:
        starts.append(extent - tile)
    return starts


def tile_boxes(width: int, height: int, tile_size: int) -> list[Box]:
    """Non-overlapping grid boxes in row-major order, borders clamped."""
    if width < 1 or height < 1 or tile_size < 1:
        raise ValueError("width, height and tile_size must be >= 1")
    w = min(tile_size, width)
    h = min(tile_size, height)
    return [
        (x, y, x + w, y + h)
        for y in _axis_starts(height, h)
        for x in _axis_starts(width, w)
    ]


def select_tiles(image: np.ndarray, rule: ForegroundRule, tile_size: int) -> list[Box]:
    """Grid boxes whose foreground-pixel fraction exceeds the rule's minimum."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a grayscale [h, w] image, got shape {image.shape}")
    image = image.astype(np.float64)
    if image.size and image.max() > 1.0:  # 8-bit input
        image = image / 255.0
    height, width = image.shape
    kept = []
    for x0, y0, x1, y1 in tile_boxes(width, height, tile_size):
        patch = image[y0:y1, x0:x1]
        fraction = float(np.mean(patch > rule.intensity_threshold))
        if fraction > rule.min_foreground_fraction:
            kept.append((x0, y0, x1, y1))
    return kept
