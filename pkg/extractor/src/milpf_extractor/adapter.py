"""Pluggable frozen encoders.

An adapter maps a grayscale patch to a fixed-length embedding and must be
deterministic. The built-in toy adapter needs no downloaded weights: it
projects a vector of pixel statistics through a frozen random matrix whose
seed is derived from the adapter name, so identical inputs always produce
identical embeddings.
"""

from __future__ import annotations

import hashlib
from typing import Protocol, runtime_checkable

import numpy as np


@runtime_checkable
class EncoderAdapter(Protocol):
    name: str
    input_size: int
    embed_dim: int

    def encode(self, patch: np.ndarray) -> np.ndarray:
        """Grayscale [h, w] array in [0, 1] -> embedding of length embed_dim."""
        ...


def _stats(patch: np.ndarray) -> np.ndarray:
    """Location, spread, shape, and coarse-layout statistics of a patch."""
    flat = patch.ravel()
    q1, q2, q3 = np.quantile(flat, [0.25, 0.5, 0.75])
    rows = patch.mean(axis=1)
    cols = patch.mean(axis=0)
    h, w = patch.shape
    ry = np.arange(h) / max(h - 1, 1)
    cx = np.arange(w) / max(w - 1, 1)
    return np.array([
        flat.mean(),
        flat.std(),
        flat.min(),
        flat.max(),
        q1, q2, q3,
        float(np.mean(flat > 0.5)),
        float(rows @ ry / max(rows.sum(), 1e-12)),  # vertical centroid
        float(cols @ cx / max(cols.sum(), 1e-12)),  # horizontal centroid
        float(np.abs(np.diff(rows)).mean() if h > 1 else 0.0),
        float(np.abs(np.diff(cols)).mean() if w > 1 else 0.0),
    ])


class ToyStatAdapter:
    """Deterministic hash-seeded projection of pixel statistics."""

    def __init__(self, embed_dim: int = 16, input_size: int = 64,
                 name: str = "toy-stats"):
        if embed_dim < 1 or input_size < 1:
            raise ValueError("embed_dim and input_size must be >= 1")
        self.name = name
        self.input_size = input_size
        self.embed_dim = embed_dim
        digest = hashlib.sha256(f"{name}:{embed_dim}".encode()).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(seed)
        n_stats = _stats(np.zeros((2, 2))).size
        self._W = rng.normal(size=(embed_dim, n_stats))
        self._b = rng.normal(size=embed_dim) * 0.1

    def encode(self, patch: np.ndarray) -> np.ndarray:
        patch = np.asarray(patch, dtype=np.float64)
        if patch.ndim != 2:
            raise ValueError(f"expected a grayscale [h, w] patch, got shape {patch.shape}")
        if patch.size == 0:
            raise ValueError("empty patch")
        return np.tanh(self._W @ _stats(patch) + self._b)


ADAPTERS = {"toy": ToyStatAdapter}


def make_adapter(name: str, **kwargs) -> EncoderAdapter:
    if name not in ADAPTERS:
        raise ValueError(f"unknown adapter {name!r}; available: {sorted(ADAPTERS)}")
    return ADAPTERS[name](**kwargs)
