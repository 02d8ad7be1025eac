"""Render a heatmap (binary P5 PGM) over a source image as a PNG."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_pgm_heat(path: str | Path) -> np.ndarray:
    """Binary maxval-255 PGM -> [h, w] float array in [0, 1]."""
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not a maxval-255 binary PGM")
    width, height = map(int, parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=width * height)
    return pixels.reshape(height, width).astype(np.float64) / 255.0


def render_overlay(
    image_path: str | Path,
    heatmap_path: str | Path,
    out_path: str | Path,
    alpha: float = 0.5,
) -> None:
    """Blend the heatmap into the red channel of the grayscale source image."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    with Image.open(image_path) as img:
        gray = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    heat = read_pgm_heat(heatmap_path)
    if heat.shape != gray.shape:
        raise ValueError(
            f"heatmap shape {heat.shape} does not match image shape {gray.shape}")
    rgb = np.stack([gray, gray, gray], axis=-1)
    rgb[..., 0] = (1 - alpha * heat) * gray + alpha * heat  # toward pure red
    rgb[..., 1] *= 1 - alpha * heat
    rgb[..., 2] *= 1 - alpha * heat
    Image.fromarray(np.rint(rgb * 255.0).astype(np.uint8), "RGB").save(out_path)
