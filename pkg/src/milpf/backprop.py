"""Exact gradients of mean BCE loss over bags, plus a finite-difference oracle.

The forward pass packs all instance embeddings of all bags into two flat
matrices (global rows, tile rows) so the MLP runs as a handful of large
matrix products; aggregation and its backward run per bag. ReLU uses the
0-at-kink subgradient and max pooling routes each coordinate's gradient to
the first argmax instance, so gradients are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedset import EmbedBag
from .milhead import (
    AggConfig,
    HeadParams,
    StreamParams,
    aggregate,
    bce_loss,
    copy_params,
    flatten_params,
    sigmoid,
    unflatten_params,
    zeros_like_params,
)


@dataclass
class _StreamPass:
    """Cached forward state for one stream over the packed instance matrix."""

    E: np.ndarray        # [n, d] packed inputs (float64)
    pre1: np.ndarray     # [n, h1] before first ReLU
    H: np.ndarray        # [n, h1] after first ReLU
    pre2: np.ndarray     # [n, h2] before second ReLU
    F: np.ndarray        # [n, h2] per-instance features
    bounds: np.ndarray   # [B+1] bag boundaries into the rows


def _pack_stream(mats: list[np.ndarray], d: int) -> tuple[np.ndarray, np.ndarray]:
    bounds = np.zeros(len(mats) + 1, dtype=np.int64)
    for i, m in enumerate(mats):
        bounds[i + 1] = bounds[i] + m.shape[0]
    if bounds[-1] == 0:
        return np.empty((0, d), dtype=np.float64), bounds
    E = np.concatenate([np.asarray(m, dtype=np.float64) for m in mats if m.shape[0]])
    return E, bounds


def _check_finite(arr: np.ndarray, where: str) -> None:
    if arr.size and not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite intermediate at {where}")


class PackedBags:
    """Bag embeddings concatenated once for repeated loss evaluations."""

    def __init__(self, bags, labels=None):
        if not bags:
            raise ValueError("empty bag list")
        if labels is None:
            labels = [b.label for b in bags]
        d = bags[0].global_embeds.shape[1]
        self.n_bags = len(bags)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.G, self.g_bounds = _pack_stream([b.global_embeds for b in bags], d)
        self.T, self.t_bounds = _pack_stream([b.tile_embeds for b in bags], d)


def _packed_stream_forward(E: np.ndarray, bounds: np.ndarray,
                           s: StreamParams) -> _StreamPass:
    pre1 = E @ s.W1.T + s.b1
    H = np.maximum(pre1, 0.0)
    pre2 = H @ s.W2.T + s.b2
    F = np.maximum(pre2, 0.0)
    return _StreamPass(E=E, pre1=pre1, H=H, pre2=pre2, F=F, bounds=bounds)


class _ForwardState:
    """Everything needed to backpropagate one packed forward pass."""

    def __init__(self, packed: PackedBags, p: HeadParams, cfg: AggConfig):
        self.labels = packed.labels
        self.p, self.cfg = p, cfg
        self.h2 = cfg.h2
        B = packed.n_bags

        self.g_pass = (
            _packed_stream_forward(packed.G, packed.g_bounds, p.psi)
            if p.psi is not None else None)
        self.t_pass = (
            _packed_stream_forward(packed.T, packed.t_bounds, p.omega)
            if p.omega is not None else None)

        self.summaries = np.zeros((B, 2 * self.h2))
        self.g_weights: list[np.ndarray | None] = [None] * B
        self.t_weights: list[np.ndarray | None] = [None] * B
        for i in range(B):
            if self.g_pass is not None:
                Fb = self._slice(self.g_pass, i)
                if Fb.shape[0]:
                    self.summaries[i, :self.h2], self.g_weights[i] = aggregate(
                        cfg.global_agg, Fb, p.psi)
            if self.t_pass is not None:
                Fb = self._slice(self.t_pass, i)
                if Fb.shape[0]:
                    self.summaries[i, self.h2:], self.t_weights[i] = aggregate(
                        cfg.local_agg, Fb, p.omega)
        self.logits = self.summaries @ p.w + p.b
        _check_finite(self.logits, "logits")

    @staticmethod
    def _slice(sp: _StreamPass, i: int) -> np.ndarray:
        return sp.F[sp.bounds[i]:sp.bounds[i + 1]]

    def mean_loss(self) -> float:
        l, y = self.logits, self.labels
        per_bag = np.maximum(l, 0.0) - l * y + np.log1p(np.exp(-np.abs(l)))
        return float(per_bag.mean())


def _as_packed(bags, labels=None) -> PackedBags:
    return bags if isinstance(bags, PackedBags) else PackedBags(bags, labels)


def bag_logits(bags, p: HeadParams, cfg: AggConfig) -> np.ndarray:
    """Logits for a list of bags (or a PackedBags) via the packed forward pass."""
    return _ForwardState(_as_packed(bags), p, cfg).logits.copy()


def _agg_backward(
    kind: str, Fb: np.ndarray, ds: np.ndarray, s: StreamParams,
    alpha: np.ndarray | None, grad_s: StreamParams,
) -> np.ndarray:
    """Gradient of ds . summary wrt per-instance features; accumulates attn grads."""
    n, h2 = Fb.shape
    if kind == "mean":
        return np.tile(ds / n, (n, 1))
    if kind == "max":
        dF = np.zeros_like(Fb)
        idx = np.argmax(Fb, axis=0)  # first argmax per coordinate
        dF[idx, np.arange(h2)] = ds
        return dF
    # attention
    a = s.attn
    scale = 1.0 / np.sqrt(h2)
    U = Fb @ a.Wv.T
    dalpha = U @ ds
    dscore = alpha * (dalpha - alpha @ dalpha)
    K = Fb @ a.Wk.T
    grad_s.attn.z += scale * (K.T @ dscore)
    grad_s.attn.Wk += scale * np.outer(a.z, Fb.T @ dscore)
    grad_s.attn.Wv += np.outer(ds, Fb.T @ alpha)
    dF = scale * np.outer(dscore, a.Wk.T @ a.z)
    dF += np.outer(alpha, a.Wv.T @ ds)
    return dF


def _stream_backward(sp: _StreamPass, dF: np.ndarray, s: StreamParams,
                     grad_s: StreamParams) -> None:
    dA2 = dF * (sp.pre2 > 0)
    grad_s.W2 += dA2.T @ sp.H
    grad_s.b2 += dA2.sum(axis=0)
    dH = dA2 @ s.W2
    dA1 = dH * (sp.pre1 > 0)
    grad_s.W1 += dA1.T @ sp.E
    grad_s.b1 += dA1.sum(axis=0)


def loss_and_grad(
    bags: list[EmbedBag],
    labels,
    p: HeadParams,
    cfg: AggConfig,
) -> tuple[float, HeadParams]:
    """Mean BCE loss over bags and its exact gradient in HeadParams shape."""
    packed = _as_packed(bags, labels)
    st = _ForwardState(packed, p, cfg)
    B = packed.n_bags
    h2 = cfg.h2
    g = zeros_like_params(p)

    dlogit = (np.asarray(sigmoid(st.logits)) - st.labels) / B
    g.b = float(dlogit.sum())
    g.w += dlogit @ st.summaries

    for sp, s, grad_s, kind, col, weights in (
        (st.g_pass, p.psi, g.psi, cfg.global_agg, 0, st.g_weights),
        (st.t_pass, p.omega, g.omega, cfg.local_agg, h2, st.t_weights),
    ):
        if sp is None:
            continue
        dF = np.zeros_like(sp.F)
        ds_all = np.outer(dlogit, p.w[col:col + h2])
        for i in range(B):
            lo, hi = sp.bounds[i], sp.bounds[i + 1]
            if hi == lo:
                continue
            dF[lo:hi] = _agg_backward(kind, sp.F[lo:hi], ds_all[i], s,
                                      weights[i], grad_s)
        _stream_backward(sp, dF, s, grad_s)

    flat = flatten_params(g)
    if not np.isfinite(flat).all():
        bad = np.flatnonzero(~np.isfinite(flat))[0]
        raise FloatingPointError(f"non-finite gradient at flat parameter index {bad}")
    return st.mean_loss(), g


def loss_only(bags, labels, p: HeadParams, cfg: AggConfig) -> float:
    return _ForwardState(_as_packed(bags, labels), p, cfg).mean_loss()


def fd_grad(
    bags, labels, p: HeadParams, cfg: AggConfig, step: float = 1e-6
) -> HeadParams:
    """Central-difference gradient with per-parameter step step*(1+|p_k|)."""
    if step <= 0:
        raise ValueError("step must be positive")
    packed = _as_packed(bags, labels)
    base = flatten_params(p)
    out = np.zeros_like(base)
    for k in range(base.size):
        h = step * (1.0 + abs(base[k]))
        for sign in (+1.0, -1.0):
            vec = base.copy()
            vec[k] += sign * h
            out[k] += sign * loss_only(packed, None, unflatten_params(vec, p), cfg)
        out[k] /= 2.0 * h
    return unflatten_params(out, p)


def kink_free(bags, labels, p: HeadParams, cfg: AggConfig, tol: float = 1e-7) -> bool:
    """True when no ReLU pre-activation or max-pooling tie sits within tol of a kink.

    Finite differences are only trustworthy away from these kinks; callers
    should skip (resample) configurations where this returns False.
    """
    packed = _as_packed(bags, labels)
    st = _ForwardState(packed, p, cfg)
    for sp, kind in ((st.g_pass, cfg.global_agg), (st.t_pass, cfg.local_agg)):
        if sp is None:
            continue
        for pre in (sp.pre1, sp.pre2):
            if pre.size and np.min(np.abs(pre)) < tol:
                return False
        if kind == "max":
            for i in range(packed.n_bags):
                Fb = sp.F[sp.bounds[i]:sp.bounds[i + 1]]
                if Fb.shape[0] > 1:
                    top2 = np.sort(Fb, axis=0)[-2:]
                    # A tie at a clamped zero is locally flat (all competing
                    # pre-activations are strictly negative once the ReLU
                    # check above passed), so only positive-value ties count.
                    tied = (top2[1] - top2[0] < tol) & (top2[1] > tol)
                    if tied.any():
                        return False
    return True


__all__ = [
    "PackedBags", "loss_and_grad", "fd_grad", "loss_only", "bag_logits",
    "kink_free", "copy_params",
]
