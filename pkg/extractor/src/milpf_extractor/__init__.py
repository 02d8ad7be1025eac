"""Embedding extraction: images -> milpf dataset containers.

This package talks to the milpf head package only through its public
interfaces: the on-disk container format it writes and the `milpf` CLI.
"""

from .adapter import EncoderAdapter, ToyStatAdapter
from .extract import extract_dataset, read_manifest
from .tiles import ForegroundRule, select_tiles, tile_boxes

__version__ = "0.1.0"

__all__ = [
    "EncoderAdapter", "ToyStatAdapter", "ForegroundRule",
    "select_tiles", "tile_boxes", "extract_dataset", "read_manifest",
]
