"""Attention-map explainability: pixel heat accumulation and box extraction.

Tile attention weights are splatted back onto pixels of their view. Each
pixel averages the weights of the tiles covering it (dividing by the
per-pixel tile count so border pixels, covered by fewer overlapping tiles,
are not systematically dimmed), then the map is max-normalized to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .embedset import ViewRecord
from .metrics import ScoredBox
from .tilegeom import TileGeom


@dataclass
class Heatmap:
    view_id: str
    width: int
    height: int
    heat: np.ndarray  # [height, width], values in [0, 1]


def attention_heatmap(
    view: ViewRecord,
    tile_geoms_with_weights: list[tuple[TileGeom, float]],
) -> Heatmap:
    """Accumulate attention weights of this view's tiles into a pixel map.

    The weights are the slice of the bag-wide attention distribution that
    belongs to this view (tiles of other views took part in the softmax but
    contribute no pixels here). Raw value at a pixel is the sum of covering
    tiles' weights divided by the covering-tile count; the result is
    max-normalized, and an all-zero map stays all-zero.
    """
    raw = np.zeros((view.image_height, view.image_width))
    cov = np.zeros_like(raw)
    for geom, weight in tile_geoms_with_weights:
        if not (0 <= geom.x0 < geom.x1 <= view.image_width
                and 0 <= geom.y0 < geom.y1 <= view.image_height):
            raise ValueError(f"tile {geom} exceeds view {view.view_id} bounds")
        raw[geom.y0:geom.y1, geom.x0:geom.x1] += weight
        cov[geom.y0:geom.y1, geom.x0:geom.x1] += 1.0
    covered = cov > 0
    raw[covered] /= cov[covered]
    peak = raw.max()
    if peak > 0:
        raw /= peak
    return Heatmap(view.view_id, view.image_width, view.image_height, raw)


def boxes_from_heatmap(h: Heatmap, threshold: float = 0.5) -> list[ScoredBox]:
    """Bounding boxes of 8-connected components of {heat >= threshold}.

    Each component scores its maximum heat; boxes come back sorted by
    descending score (ties by box position for determinism).
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    mask = h.heat >= threshold
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    boxes = []
    for sl in ndimage.find_objects(labels):
        region = labels[sl] > 0
        score = float(h.heat[sl][region].max())
        boxes.append(ScoredBox(
            x0=float(sl[1].start), y0=float(sl[0].start),
            x1=float(sl[1].stop), y1=float(sl[0].stop),
            score=score, view_id=h.view_id,
        ))
    boxes.sort(key=lambda b: (-b.score, b.x0, b.y0, b.x1, b.y1))
    return boxes


# ---------------------------------------------------------------------------
# PGM interchange (binary P5, maxval 255)
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, h: Heatmap) -> None:
    data = np.rint(np.clip(h.heat, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{h.width} {h.height}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: str | Path) -> Heatmap:
    path = Path(path)
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not a maxval-255 binary PGM")
    width, height = map(int, parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=width * height)
    heat = pixels.reshape(height, width).astype(np.float64) / 255.0
    return Heatmap(path.stem, width, height, heat)
