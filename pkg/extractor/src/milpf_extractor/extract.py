"""Manifest-driven extraction into the milpf dataset container format.

The container is a directory with:
    manifest.json   format_version, encoder_name, embed_dim, tile_size,
                    per-bag records with row offsets into the binary arrays
    global.f32      little-endian float32 rows, one per global embedding
    tiles.f32       little-endian float32 rows, one per tile embedding
    tile_geoms.i32  little-endian int32 quintuples: view_index, x0, y0, x1, y1

Everything is written deterministically: bags in manifest order, views in
manifest order within a bag, tiles in grid order within a view.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .adapter import EncoderAdapter
from .tiles import ForegroundRule, select_tiles

FORMAT_VERSION = 1


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    patient_id: str
    bag_id: str
    view_id: str
    image_path: str
    label: int


MANIFEST_FIELDS = ("patient_id", "bag_id", "view_id", "image_path", "label")


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """CSV with header patient_id,bag_id,view_id,image_path,label."""
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ExtractionError(f"{path}: manifest missing columns {sorted(missing)}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            label = rec["label"].strip()
            if label not in ("0", "1"):
                raise ExtractionError(
                    f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            rows.append(ManifestRow(
                patient_id=rec["patient_id"].strip(),
                bag_id=rec["bag_id"].strip(),
                view_id=rec["view_id"].strip(),
                image_path=rec["image_path"].strip(),
                label=int(label),
            ))
    if not rows:
        raise ExtractionError(f"{path}: empty manifest")
    return rows


def load_grayscale(path: str | Path) -> np.ndarray:
    """Image file -> [h, w] float array in [0, 1]."""
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            return np.asarray(gray, dtype=np.float64) / 255.0
    except OSError as e:
        raise ExtractionError(f"cannot read image {path}: {e}") from e


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    pil = Image.fromarray(np.rint(image * 255.0).astype(np.uint8))
    return np.asarray(pil.resize((size, size), Image.BILINEAR),
                      dtype=np.float64) / 255.0


def _group_bags(rows: list[ManifestRow]) -> list[list[ManifestRow]]:
    """Group rows by bag_id preserving first-appearance order."""
    order: dict[str, list[ManifestRow]] = {}
    for row in rows:
        order.setdefault(row.bag_id, []).append(row)
    for bag_id, members in order.items():
        patients = {m.patient_id for m in members}
        labels = {m.label for m in members}
        if len(patients) > 1:
            raise ExtractionError(f"bag {bag_id}: multiple patient ids {sorted(patients)}")
        if len(labels) > 1:
            raise ExtractionError(f"bag {bag_id}: conflicting labels")
    return list(order.values())


def extract_dataset(
    manifest: str | Path | list[ManifestRow],
    adapter: EncoderAdapter,
    rule: ForegroundRule,
    out_path: str | Path,
    tile_size: int = 64,
) -> Path:
    """Encode every view and selected tile, writing the container to out_path."""
    rows = read_manifest(manifest) if isinstance(manifest, (str, Path)) else manifest
    if tile_size < 1:
        raise ExtractionError("tile_size must be >= 1")
    bags = _group_bags(rows)

    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    bag_records = []
    global_rows: list[np.ndarray] = []
    tile_rows: list[np.ndarray] = []
    geom_rows: list[list[int]] = []
    g_off = t_off = 0

    for members in bags:
        views = []
        n_global = 0
        n_tiles_bag = 0
        for view_index, row in enumerate(members):
            image = load_grayscale(row.image_path)
            height, width = image.shape
            embedding = np.asarray(
                adapter.encode(_resize(image, adapter.input_size)), dtype=np.float64)
            if embedding.shape != (adapter.embed_dim,):
                raise ExtractionError(
                    f"adapter {adapter.name} returned shape {embedding.shape}, "
                    f"expected ({adapter.embed_dim},)")
            global_rows.append(embedding.astype("<f4"))
            n_global += 1

            boxes = select_tiles(image, rule, tile_size)
            for x0, y0, x1, y1 in boxes:
                tile_rows.append(np.asarray(
                    adapter.encode(image[y0:y1, x0:x1]), dtype="<f4"))
                geom_rows.append([view_index, x0, y0, x1, y1])
            n_tiles_bag += len(boxes)
            views.append({"view_id": row.view_id, "width": width,
                          "height": height, "n_tiles": len(boxes)})

        first = members[0]
        bag_records.append({
            "bag_id": first.bag_id,
            "patient_id": first.patient_id,
            "label": first.label,
            "split": None,
            "views": views,
            "global_offset": g_off,
            "n_global": n_global,
            "tile_offset": t_off,
            "n_tiles": n_tiles_bag,
        })
        g_off += n_global
        t_off += n_tiles_bag

    manifest_doc = {
        "format_version": FORMAT_VERSION,
        "encoder_name": adapter.name,
        "embed_dim": adapter.embed_dim,
        "tile_size": tile_size,
        "bags": bag_records,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest_doc, indent=1, sort_keys=True), encoding="utf-8")

    d = adapter.embed_dim
    _stack(global_rows, d, "<f4").tofile(out / "global.f32")
    _stack(tile_rows, d, "<f4").tofile(out / "tiles.f32")
    np.asarray(geom_rows, dtype="<i4").reshape(-1, 5).tofile(out / "tile_geoms.i32")
    return out


def _stack(rows: list[np.ndarray], d: int, dtype: str) -> np.ndarray:
    if not rows:
        return np.empty((0, d), dtype=dtype)
    return np.vstack(rows).astype(dtype)
