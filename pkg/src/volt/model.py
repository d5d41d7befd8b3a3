"""The volume transformer: view encoder, volume decoder and voxel head.

Voxel grids are plain ndarrays of shape ``(G, G, G)`` indexed ``[x, y, z]``;
binary grids hold 0/1, probabilistic grids hold values in [0, 1]. Batched
calls simply add leading axes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .attention import HeadParams, mh_deatt, mh_view_vol_attn, mh_vol_attn
from .tensor import (
    ParamStore,
    Tensor,
    as_tensor,
    binary_cross_entropy,
    layer_norm,
    make_rng,
    matmul,
    relu,
    reshape,
    sigmoid,
    transpose,
)


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    d_k: int = 16
    ffn_hidden: int = 256
    enc_layers: int = 6
    dec_layers: int = 6
    grid: int = 16
    token_edge: int = 4
    max_views: int = 24
    enhance: bool = True

    def __post_init__(self):
        for f in fields(self):
            if f.name != "enhance" and int(getattr(self, f.name)) < 1:
                raise ConfigError(f"{f.name} must be >= 1")
        if self.grid % self.token_edge:
            raise ConfigError(f"grid {self.grid} is not divisible by token edge {self.token_edge}")

    @property
    def tokens_per_axis(self) -> int:
        return self.grid // self.token_edge

    @property
    def n_tokens(self) -> int:
        return self.tokens_per_axis**3

    @property
    def token_voxels(self) -> int:
        return self.token_edge**3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


MICRO = ModelConfig(d=8, heads=2, d_k=4, ffn_hidden=16, enc_layers=2, dec_layers=2, grid=4, token_edge=2, max_views=24)


# ---------------------------------------------------------------------------
# token stitching
# ---------------------------------------------------------------------------

def voxel_to_token(i: int, j: int, k: int, grid: int, edge: int) -> tuple[int, int]:
    """Map voxel (i, j, k) to (token index, offset inside the token's sub-volume).

    Both indices count x fastest, then y, then z.
    """
    t = grid // edge
    a, b, c = i // edge, j // edge, k // edge
    oi, oj, ok = i % edge, j % edge, k % edge
    return a + t * b + t * t * c, oi + edge * oj + edge * edge * ok


def token_to_voxel(n: int, offset: int, grid: int, edge: int) -> tuple[int, int, int]:
    t = grid // edge
    a, b, c = n % t, (n // t) % t, n // (t * t)
    oi, oj, ok = offset % edge, (offset // edge) % edge, offset // (edge * edge)
    return a * edge + oi, b * edge + oj, c * edge + ok


def stitch(token_values, grid: int, edge: int) -> Tensor:
    """``(..., N, s^3)`` per-token sub-volumes -> ``(..., G, G, G)`` grid."""
    x = as_tensor(token_values)
    t = grid // edge
    *lead, n, k = x.shape
    if n != t**3 or k != edge**3:
        raise ValueError(f"expected ({t**3}, {edge**3}) token layout, got {(n, k)}")
    nd = len(lead)
    x = reshape(x, (*lead, t, t, t, edge, edge, edge))  # (c, b, a, k, j, i)
    x = transpose(x, (*range(nd), nd + 2, nd + 5, nd + 1, nd + 4, nd, nd + 3))
    return reshape(x, (*lead, grid, grid, grid))


def unstitch(grid_values: np.ndarray, edge: int) -> np.ndarray:
    """Inverse of :func:`stitch` for plain arrays."""
    g = np.asarray(grid_values)
    *lead, grid, _, _ = g.shape
    t = grid // edge
    nd = len(lead)
    x = g.reshape(*lead, t, edge, t, edge, t, edge)  # (a, i, b, j, c, k)
    x = np.transpose(x, (*range(nd), nd + 4, nd + 2, nd, nd + 5, nd + 3, nd + 1))
    return x.reshape(*lead, t**3, edge**3)


def positional_encoding(config: ModelConfig) -> np.ndarray:
    """Fixed 3D sinusoidal code over token lattice coordinates, zero padded to d."""
    t, d = config.tokens_per_axis, config.d
    per_axis = 2 * (d // 6)
    out = np.zeros((config.n_tokens, d))
    if per_axis == 0:
        return out
    n = np.arange(config.n_tokens)
    coords = (n % t, (n // t) % t, n // (t * t))
    freqs = 1.0 / 10000.0 ** (np.arange(per_axis // 2) * 2.0 / per_axis)
    for axis, c in enumerate(coords):
        ang = c[:, None] * freqs[None, :]
        block = out[:, axis * per_axis:(axis + 1) * per_axis]
        block[:, 0::2] = np.sin(ang)
        block[:, 1::2] = np.cos(ang)
    return out


def bce_loss(pred, gt) -> Tensor:
    """Voxel-wise mean binary cross-entropy of a probabilistic grid against a binary one."""
    pred = as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"grid size mismatch: {pred.shape} vs {gt.shape}")
    return binary_cross_entropy(pred, gt)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

# Output projections of residual branches start this much smaller than Xavier;
# with full-size branches the 6+6 post-norm stack collapses all volume tokens
# onto one vector at initialisation and training stalls.
RESIDUAL_INIT_SCALE = 0.1


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class VoltModel:
    """VolT (``enhance=False``) or EVolT (``enhance=True``) with its parameters."""

    def __init__(self, config: ModelConfig, seed: int = 0, residual_init_scale: float = RESIDUAL_INIT_SCALE):
        self.config = config
        self.seed = seed
        self.residual_init_scale = residual_init_scale
        self.params = ParamStore()
        self._init_params()

    def _linear(self, name: str, fan_in: int, fan_out: int, residual: bool = False):
        gain = self.residual_init_scale if residual else 1.0
        self.params.add(name, _xavier(make_rng(self.seed, "init/" + name), fan_in, fan_out, gain))

    def _heads(self, prefix: str):
        c = self.config
        for w in ("wq", "wk", "wv"):
            self._linear(f"{prefix}.{w}", c.d, c.heads * c.d_k)

    def _ffn(self, prefix: str):
        c = self.config
        self._linear(f"{prefix}.w1", c.d, c.ffn_hidden)
        self.params.add(f"{prefix}.b1", np.zeros(c.ffn_hidden))
        self._linear(f"{prefix}.w2", c.ffn_hidden, c.d, residual=True)
        self.params.add(f"{prefix}.b2", np.zeros(c.d))

    def _norm(self, prefix: str):
        self.params.add(f"{prefix}.gamma", np.ones(self.config.d))
        self.params.add(f"{prefix}.beta", np.zeros(self.config.d))

    def _init_params(self):
        c = self.config
        hk = c.heads * c.d_k
        for l in range(c.enc_layers):
            p = f"enc.{l}"
            self._heads(f"{p}.attn")
            self._linear(f"{p}.attn.w_view", hk + c.d if c.enhance else hk, c.d, residual=True)
            self._norm(f"{p}.norm1")
            self._ffn(f"{p}.ffn")
            self._norm(f"{p}.norm2")
        self.params.add("dec.queries", make_rng(self.seed, "init/dec.queries").normal(0.0, 0.02, (c.n_tokens, c.d)))
        self.params.add("dec.pos", positional_encoding(c), trainable=False)
        for l in range(c.dec_layers):
            p = f"dec.{l}"
            self._heads(f"{p}.vol")
            self._linear(f"{p}.vol.w_vol", hk, c.d, residual=True)
            self._norm(f"{p}.norm1")
            self._heads(f"{p}.cross")
            self._linear(f"{p}.cross.w", hk, c.d, residual=True)
            self._norm(f"{p}.norm2")
            self._ffn(f"{p}.ffn")
            self._norm(f"{p}.norm3")
        self.params.add("head.w", np.zeros((c.d, c.token_voxels)))
        self.params.add("head.b", np.zeros(c.token_voxels))

    # -- building blocks ---------------------------------------------------

    def head_params(self, prefix: str) -> HeadParams:
        p = self.params
        return HeadParams(p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"], self.config.heads)

    def norm(self, x, prefix: str) -> Tensor:
        return layer_norm(x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"])

    def ffn(self, x, prefix: str) -> Tensor:
        p = self.params
        h = relu(matmul(x, p[f"{prefix}.w1"]) + p[f"{prefix}.b1"])
        return matmul(h, p[f"{prefix}.w2"]) + p[f"{prefix}.b2"]

    # -- forward -------------------------------------------------------------

    def _check_views(self, views) -> Tensor:
        x0 = as_tensor(views)
        if x0.ndim < 2 or x0.shape[-1] != self.config.d:
            raise ValueError(f"views must be (..., M, {self.config.d}), got {x0.shape}")
        if x0.shape[-2] == 0:
            raise ValueError("at least one view is required")
        return x0

    def encode(self, views, trace: bool = False) -> tuple[Tensor, list[np.ndarray]]:
        """Run the encoder stack. Returns layer-L embeddings and, if ``trace``,
        one ``(..., H, M, M)`` score array per block."""
        x0 = self._check_views(views)
        x, traces = x0, []
        for l in range(self.config.enc_layers):
            p = f"enc.{l}"
            a, scores = mh_deatt(x, x0, self.head_params(f"{p}.attn"), self.params[f"{p}.attn.w_view"],
                                 enhance=self.config.enhance)
            xh = self.norm(a + x, f"{p}.norm1")
            x = self.norm(self.ffn(xh, f"{p}.ffn") + xh, f"{p}.norm2")
            if trace:
                traces.append(scores.value.copy())
        return x, traces

    def decode(self, x_l, trace: bool = False) -> tuple[Tensor, list[tuple[np.ndarray, np.ndarray]]]:
        """Run the decoder stack against encoder output ``x_l``.

        Traces are ``(volume-volume, view-volume)`` score pairs per block.
        """
        p = self.params
        y = p["dec.queries"] + p["dec.pos"]
        traces = []
        for l in range(self.config.dec_layers):
            q = f"dec.{l}"
            a, s_vol = mh_vol_attn(y, self.head_params(f"{q}.vol"), p[f"{q}.vol.w_vol"])
            yh = self.norm(a + y, f"{q}.norm1")
            a, s_cross = mh_view_vol_attn(yh, x_l, self.head_params(f"{q}.cross"), p[f"{q}.cross.w"])
            yt = self.norm(a + yh, f"{q}.norm2")
            y = self.norm(self.ffn(yt, f"{q}.ffn") + yt, f"{q}.norm3")
            if trace:
                traces.append((s_vol.value.copy(), s_cross.value.copy()))
        return y, traces

    def token_logits(self, y) -> Tensor:
        return matmul(y, self.params["head.w"]) + self.params["head.b"]

    def forward(self, views) -> Tensor:
        """Differentiable probabilistic grid ``(..., G, G, G)``."""
        x, _ = self.encode(views)
        y, _ = self.decode(x)
        return stitch(sigmoid(self.token_logits(y)), self.config.grid, self.config.token_edge)

    def predict_volume(self, views) -> np.ndarray:
        return self.forward(views).value.copy()

    def loss(self, views, gt) -> Tensor:
        return bce_loss(self.forward(views), gt)
