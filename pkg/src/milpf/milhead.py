"""Two-stream MIL head: per-instance MLP, aggregators, late fusion, BCE.

Each active stream passes its instance embeddings through a small MLP
(embed_dim -> h1 -> h2, ReLU after each layer), pools the per-instance
features with mean, element-wise max, or single-latent-query cross
attention, and the final linear layer scores the concatenation of the two
stream summaries. A disabled stream contributes a zero block so the final
layer always sees 2*h2 inputs. All computation here is float64 and pure.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .embedset import EmbedBag

log = logging.getLogger(__name__)

AGG_KINDS = ("none", "mean", "max", "attention")

CHECKPOINT_MAGIC = b"MILPF001"


@dataclass(frozen=True)
class AggConfig:
    global_agg: str = "max"
    local_agg: str = "attention"
    h1: int = 16
    h2: int = 8

    def __post_init__(self):
        for kind in (self.global_agg, self.local_agg):
            if kind not in AGG_KINDS:
                raise ValueError(f"unknown aggregator {kind!r}")
        if self.global_agg == "none" and self.local_agg == "none":
            raise ValueError("at least one stream must be active")


@dataclass
class AttnParams:
    z: np.ndarray    # [h2] latent query
    Wk: np.ndarray   # [h2, h2]
    Wv: np.ndarray   # [h2, h2]


@dataclass
class StreamParams:
    W1: np.ndarray   # [h1, d]
    b1: np.ndarray   # [h1]
    W2: np.ndarray   # [h2, h1]
    b2: np.ndarray   # [h2]
    attn: AttnParams | None = None


@dataclass
class HeadParams:
    psi: StreamParams | None    # global stream
    omega: StreamParams | None  # local stream
    w: np.ndarray               # [2*h2]
    b: float


def _check_stream(cfg_kind: str, s: StreamParams | None, name: str) -> None:
    if cfg_kind == "none":
        if s is not None:
            raise ValueError(f"{name} stream disabled but parameters present")
        return
    if s is None:
        raise ValueError(f"{name} stream enabled but parameters missing")
    if cfg_kind == "attention" and s.attn is None:
        raise ValueError(f"{name} stream uses attention but attn params missing")


# ---------------------------------------------------------------------------
# Forward computations
# ---------------------------------------------------------------------------

def mlp_forward(e: np.ndarray, s: StreamParams) -> np.ndarray:
    """ReLU(W2 @ ReLU(W1 @ e + b1) + b2) for a single embedding."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (s.W1.shape[1],):
        raise ValueError(f"embedding length {e.shape} does not match W1 {s.W1.shape}")
    h = np.maximum(s.W1 @ e + s.b1, 0.0)
    return np.maximum(s.W2 @ h + s.b2, 0.0)


def mlp_forward_batch(E: np.ndarray, s: StreamParams) -> np.ndarray:
    """Row-wise MLP over an [n, d] matrix; returns [n, h2]."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] != s.W1.shape[1]:
        raise ValueError(f"batch shape {E.shape} does not match W1 {s.W1.shape}")
    H = np.maximum(E @ s.W1.T + s.b1, 0.0)
    return np.maximum(H @ s.W2.T + s.b2, 0.0)


def attention_scores(F: np.ndarray, attn: AttnParams) -> np.ndarray:
    """Pre-softmax scores z . (Wk f_j) / sqrt(h2) for each row of F."""
    h2 = attn.z.shape[0]
    return (F @ attn.Wk.T) @ attn.z / np.sqrt(h2)


def softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max())
    return e / e.sum()


def aggregate(
    kind: str, features: np.ndarray, s: StreamParams | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Pool [n, h2] per-instance features to a single summary vector.

    Returns (summary, weights); weights are the attention distribution and
    are None for mean/max. Mean sums each coordinate in sorted order and max
    is element-wise, so both are bit-identical under input permutation.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("aggregate requires a non-empty [n, h2] feature matrix")
    if kind == "mean":
        return np.sort(features, axis=0).sum(axis=0) / features.shape[0], None
    if kind == "max":
        return features.max(axis=0), None
    if kind == "attention":
        if s is None or s.attn is None:
            raise ValueError("attention aggregation requires attn parameters")
        alpha = softmax(attention_scores(features, s.attn))
        values = features @ s.attn.Wv.T
        return alpha @ values, alpha
    raise ValueError(f"cannot aggregate with kind {kind!r}")


def _stream_summary(
    kind: str, embeds: np.ndarray, s: StreamParams, bag_id: str, what: str
) -> tuple[np.ndarray, np.ndarray | None]:
    if embeds.shape[0] == 0:
        log.warning("bag %s: empty %s instance set, using zero summary", bag_id, what)
        return np.zeros(s.W2.shape[0]), None
    return aggregate(kind, mlp_forward_batch(embeds, s), s)


def forward(
    bag: EmbedBag, p: HeadParams, cfg: AggConfig
) -> tuple[float, np.ndarray | None]:
    """Bag logit and, when the local stream uses attention, the tile weights."""
    _check_stream(cfg.global_agg, p.psi, "global")
    _check_stream(cfg.local_agg, p.omega, "local")
    h2 = cfg.h2
    g_sum = np.zeros(h2)
    t_sum = np.zeros(h2)
    local_weights = None
    if p.psi is not None:
        g_sum, _ = _stream_summary(cfg.global_agg, bag.global_embeds, p.psi,
                                   bag.bag_id, "global")
    if p.omega is not None:
        t_sum, local_weights = _stream_summary(cfg.local_agg, bag.tile_embeds, p.omega,
                                               bag.bag_id, "tile")
    logit = float(p.w @ np.concatenate([g_sum, t_sum]) + p.b)
    return logit, local_weights


def sigmoid(x: float | np.ndarray) -> float | np.ndarray:
    return np.where(np.asarray(x) >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def bce_loss(logit: float, label: int) -> float:
    """Numerically stable binary cross-entropy from a raw logit."""
    l = float(logit)
    return max(l, 0.0) - l * label + np.log1p(np.exp(-abs(l)))


def count_params(cfg: AggConfig, d: int) -> int:
    """Exact trainable-parameter count for a configuration at embed dim d."""
    h1, h2 = cfg.h1, cfg.h2
    total = 2 * h2 + 1  # final layer
    for kind in (cfg.global_agg, cfg.local_agg):
        if kind == "none":
            continue
        total += d * h1 + h1 + h1 * h2 + h2
        if kind == "attention":
            total += 2 * h2 * h2 + h2  # Wk, Wv, latent query
    return total


# ---------------------------------------------------------------------------
# Parameter construction and flattening
# ---------------------------------------------------------------------------

def init_params(
    cfg: AggConfig, d: int, rng: np.random.Generator, init_scale: float = 1.0
) -> HeadParams:
    """Zero-mean uniform init with half-width init_scale/sqrt(fan_in); zero biases."""
    def uniform(shape, fan_in):
        a = init_scale / np.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape)

    def stream(kind):
        if kind == "none":
            return None
        s = StreamParams(
            W1=uniform((cfg.h1, d), d),
            b1=np.zeros(cfg.h1),
            W2=uniform((cfg.h2, cfg.h1), cfg.h1),
            b2=np.zeros(cfg.h2),
        )
        if kind == "attention":
            s.attn = AttnParams(
                z=uniform(cfg.h2, cfg.h2),
                Wk=uniform((cfg.h2, cfg.h2), cfg.h2),
                Wv=uniform((cfg.h2, cfg.h2), cfg.h2),
            )
        return s

    return HeadParams(
        psi=stream(cfg.global_agg),
        omega=stream(cfg.local_agg),
        w=uniform(2 * cfg.h2, 2 * cfg.h2),
        b=0.0,
    )


def _stream_tensors(s: StreamParams) -> list[np.ndarray]:
    out = [s.W1, s.b1, s.W2, s.b2]
    if s.attn is not None:
        out += [s.attn.z, s.attn.Wk, s.attn.Wv]
    return out


def param_tensors(p: HeadParams) -> list[np.ndarray]:
    """All parameter tensors in declared (checkpoint) order."""
    out: list[np.ndarray] = []
    for s in (p.psi, p.omega):
        if s is not None:
            out += _stream_tensors(s)
    out += [p.w, np.array([p.b])]
    return out


def flatten_params(p: HeadParams) -> np.ndarray:
    return np.concatenate([t.ravel() for t in param_tensors(p)])


def unflatten_params(vec: np.ndarray, template: HeadParams) -> HeadParams:
    """Rebuild a HeadParams with template's shapes from a flat vector."""
    vec = np.asarray(vec, dtype=np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        n = math.prod(shape) if isinstance(shape, tuple) else int(shape)
        out = vec[pos:pos + n].reshape(shape).copy()
        pos += n
        return out

    def stream(s):
        if s is None:
            return None
        new = StreamParams(W1=take(s.W1.shape), b1=take(s.b1.shape),
                           W2=take(s.W2.shape), b2=take(s.b2.shape))
        if s.attn is not None:
            new.attn = AttnParams(z=take(s.attn.z.shape), Wk=take(s.attn.Wk.shape),
                                  Wv=take(s.attn.Wv.shape))
        return new

    psi = stream(template.psi)
    omega = stream(template.omega)
    w = take(template.w.shape)
    b = float(take((1,))[0])
    if pos != vec.size:
        raise ValueError(f"flat vector length {vec.size}, expected {pos}")
    return HeadParams(psi=psi, omega=omega, w=w, b=b)


def zeros_like_params(p: HeadParams) -> HeadParams:
    return unflatten_params(np.zeros(flatten_params(p).size), p)


def copy_params(p: HeadParams) -> HeadParams:
    return unflatten_params(flatten_params(p), p)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, p: HeadParams, cfg: AggConfig, d: int) -> None:
    """Binary checkpoint: magic, dims, aggregator kinds, float64 tensors."""
    header = struct.pack(
        "<5i", d, cfg.h1, cfg.h2,
        AGG_KINDS.index(cfg.global_agg), AGG_KINDS.index(cfg.local_agg))
    payload = np.concatenate([np.asarray(t, dtype="<f8").ravel()
                              for t in param_tensors(p)])
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(header)
        f.write(payload.tobytes())


def load_checkpoint(path: str | Path) -> tuple[HeadParams, AggConfig, int]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        d, h1, h2, gi, li = struct.unpack("<5i", f.read(20))
        cfg = AggConfig(global_agg=AGG_KINDS[gi], local_agg=AGG_KINDS[li], h1=h1, h2=h2)
        vec = np.frombuffer(f.read(), dtype="<f8")
    expected = count_params(cfg, d)
    if vec.size != expected:
        raise ValueError(f"{path}: {vec.size} parameters on disk, expected {expected}")
    template = init_params(cfg, d, np.random.default_rng(0))
    return unflatten_params(vec.astype(np.float64), template), cfg, d
