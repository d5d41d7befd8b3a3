"""Scaled dot-product attention and the three multi-head layers.

Per-head projections are stored stacked: ``wq`` has shape ``(d, H * d_k)``
and its column block ``h * d_k:(h + 1) * d_k`` is head ``h``'s W_Q. Every
layer returns its attention scores with shape ``(..., H, rows, cols)`` so
callers can trace them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, concat, matmul, reshape, scale, softmax, swap_last, transpose

ROLES = ("view-view", "volume-volume", "view-volume")


@dataclass
class HeadParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    n_heads: int

    def __post_init__(self):
        if not (self.wq.shape == self.wk.shape == self.wv.shape):
            raise ShapeError("W_Q, W_K, W_V must share a shape")
        if self.wq.ndim != 2 or self.wq.shape[1] % self.n_heads:
            raise ShapeError(f"projection width {self.wq.shape} not divisible into {self.n_heads} heads")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.wq.shape[1] // self.n_heads

    def head(self, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cols = slice(h * self.d_k, (h + 1) * self.d_k)
        return self.wq.value[:, cols], self.wk.value[:, cols], self.wv.value[:, cols]


@dataclass
class AttentionTrace:
    layer: int
    head: int
    role: str
    scores: np.ndarray


def traces_from_scores(scores, layer: int, role: str) -> list[AttentionTrace]:
    """Split an unbatched ``(H, rows, cols)`` score array into per-head traces."""
    s = scores.value if isinstance(scores, Tensor) else np.asarray(scores)
    if s.ndim != 3:
        raise ShapeError(f"expected (H, rows, cols) scores, got {s.shape}")
    return [AttentionTrace(layer, h, role, s[h].copy()) for h in range(s.shape[0])]


def attn(q, k, v) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v, batched over leading axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise ShapeError(f"q/k/v widths differ: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys ({k.shape[-2]}) and values ({v.shape[-2]}) row counts differ")
    d_k = q.shape[-1]
    scores = softmax(scale(matmul(q, swap_last(k)), 1.0 / np.sqrt(d_k)))
    return matmul(scores, v), scores


def diview(a, x0) -> Tensor:
    """Feature-axis concatenation of attention output with the input view embeddings."""
    a, x0 = as_tensor(a), as_tensor(x0)
    if a.shape[:-1] != x0.shape[:-1]:
        raise ShapeError(f"row mismatch between attention output {a.shape} and X0 {x0.shape}")
    return concat([a, x0], axis=-1)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, rows, width = x.shape
    x = reshape(x, (*lead, rows, n_heads, width // n_heads))
    nd = len(lead)
    return transpose(x, (*range(nd), nd + 1, nd, nd + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, rows, d_k = x.shape
    nd = len(lead)
    x = transpose(x, (*range(nd), nd + 1, nd, nd + 2))
    return reshape(x, (*lead, rows, h * d_k))


def _multi_head(queries, keys, heads: HeadParams) -> tuple[Tensor, Tensor]:
    queries, keys = as_tensor(queries), as_tensor(keys)
    if queries.shape[-1] != heads.d or keys.shape[-1] != heads.d:
        raise ShapeError(f"inputs must have width {heads.d}, got {queries.shape} and {keys.shape}")
    q = split_heads(matmul(queries, heads.wq), heads.n_heads)
    k = split_heads(matmul(keys, heads.wk), heads.n_heads)
    v = split_heads(matmul(keys, heads.wv), heads.n_heads)
    out, scores = attn(q, k, v)
    return merge_heads(out), scores


def _check_out(w: Tensor, rows: int, name: str):
    if w.ndim != 2 or w.shape[0] != rows:
        raise ShapeError(f"{name} must have {rows} rows, got {w.shape}")


def mh_deatt(x, x0, heads: HeadParams, w_view, enhance: bool = True) -> tuple[Tensor, Tensor]:
    """Multi-head view self-attention; with ``enhance`` the heads are concatenated
    with ``x0`` before the output projection."""
    w_view = as_tensor(w_view)
    a, scores = _multi_head(x, x, heads)
    if enhance:
        a = diview(a, x0)
    _check_out(w_view, a.shape[-1], "w_view")
    return matmul(a, w_view), scores


def mh_vol_attn(y, heads: HeadParams, w_vol) -> tuple[Tensor, Tensor]:
    w_vol = as_tensor(w_vol)
    a, scores = _multi_head(y, y, heads)
    _check_out(w_vol, a.shape[-1], "w_vol")
    return matmul(a, w_vol), scores


def mh_view_vol_attn(y, x_l, heads: HeadParams, w) -> tuple[Tensor, Tensor]:
    """Volume tokens query the encoder's view embeddings."""
    w = as_tensor(w)
    a, scores = _multi_head(y, x_l, heads)
    _check_out(w, a.shape[-1], "w")
    return matmul(a, w), scores
