"""Transformer encoder for unordered, uv-annotated patch sequences.

Patches are flattened and linearly embedded, each token receives the
positional embedding of the grid cell its centre falls in, a learned CLS
token is prepended, and the sequence passes through pre-norm transformer
layers. The CLS position of the final (normed) output is the image
representation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from modiqa import autodiff as ad
from modiqa.autodiff import ContractError, DimensionError, Parameter
from modiqa.layers import LayerNorm, Linear, Module, trunc_normal

_UV_CLAMP = 1e-9


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 16
    hidden_size: int = 768
    num_layers: int = 6
    num_heads: int = 12
    mlp_ratio: int = 4
    pos_grid: int = 14

    def __post_init__(self):
        if min(self.patch_size, self.hidden_size, self.num_layers, self.num_heads, self.mlp_ratio, self.pos_grid) < 1:
            raise ConfigError(f"all encoder sizes must be positive: {self}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")

    @property
    def patch_dim(self):
        return 3 * self.patch_size * self.patch_size

    def to_dict(self):
        return asdict(self)


def positional_index(uv, grid):
    """Row-major index of the positional grid cell containing each ``(u, v)``.

    ``uv`` may be a single pair or an array of shape ``(..., 2)``; coordinates
    equal to 1 fall into the last cell.
    """
    uv = np.asarray(uv, dtype=np.float64)
    if uv.shape[-1] != 2:
        raise DimensionError(f"uv must end in a pair axis, got shape {uv.shape}")
    if np.any(uv < 0.0) or np.any(uv > 1.0) or not np.all(np.isfinite(uv)):
        raise ContractError("uv coordinates must lie in [0, 1]^2")
    cells = np.floor(np.minimum(uv, 1.0 - _UV_CLAMP) * grid).astype(np.intp)
    idx = cells[..., 0] * grid + cells[..., 1]
    return int(idx) if idx.ndim == 0 else idx


def scaled_dot_product_attention(q, k, v):
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes."""
    dk = q.shape[-1]
    scores = ad.matmul(q, ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    weights = ad.softmax(scores * (1.0 / np.sqrt(dk)))
    return ad.matmul(weights, v)


class MultiHeadAttention(Module):
    def __init__(self, dim, num_heads, rng, dtype=np.float64):
        if dim % num_heads:
            raise ConfigError(f"dimension {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.query = Linear(dim, dim, rng, dtype=dtype)
        self.key = Linear(dim, dim, rng, dtype=dtype)
        self.value = Linear(dim, dim, rng, dtype=dtype)
        self.out = Linear(dim, dim, rng, dtype=dtype)

    def _split(self, x):
        *lead, n, d = x.shape
        h = self.num_heads
        x = ad.reshape(x, (*lead, n, h, d // h))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return ad.transpose(x, axes)

    def __call__(self, x):
        *lead, n, d = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        heads = scaled_dot_product_attention(q, k, v)
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        merged = ad.reshape(ad.transpose(heads, axes), (*lead, n, d))
        return self.out(merged)


class MLP(Module):
    def __init__(self, dim, hidden, rng, dtype=np.float64):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm residual block: attention then MLP."""

    def __init__(self, cfg, rng, dtype=np.float64):
        d = cfg.hidden_size
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(d, cfg.num_heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.mlp = MLP(d, cfg.mlp_ratio * d, rng, dtype=dtype)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PositionalTable(Module):
    def __init__(self, cfg, rng, dtype=np.float64):
        self.cls_embedding = Parameter(trunc_normal(rng, (cfg.hidden_size,), dtype=dtype))
        self.grid_embeddings = Parameter(trunc_normal(rng, (cfg.pos_grid**2, cfg.hidden_size), dtype=dtype))


class PatchEncoder(Module):
    """Siamese-ready encoder: one instance encodes both images of a pair."""

    def __init__(self, cfg: ViTConfig, rng=None, dtype=np.float64):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = cfg
        self.dtype = np.dtype(dtype)
        self.patch_embed = Linear(cfg.patch_dim, cfg.hidden_size, rng, dtype=dtype)
        self.positions = PositionalTable(cfg, rng, dtype=dtype)
        self.layers = [EncoderLayer(cfg, rng, dtype=dtype) for _ in range(cfg.num_layers)]
        self.norm = LayerNorm(cfg.hidden_size, dtype=dtype)

    def embed_patches(self, patches):
        """Flatten ``(..., p, p, 3)`` patches and project them to the hidden size."""
        patches = np.asarray(patches.data if isinstance(patches, ad.Tensor) else patches, dtype=self.dtype)
        p = self.config.patch_size
        if patches.shape[-3:] != (p, p, 3):
            raise ConfigError(f"expected patches of shape (..., {p}, {p}, 3), got {patches.shape}")
        flat = patches.reshape(*patches.shape[:-3], self.config.patch_dim)
        return self.patch_embed(ad.Tensor(flat))

    def assemble_sequence(self, tokens, pos_idx):
        """Add positional embeddings per token and prepend the CLS embedding."""
        pos_idx = np.asarray(pos_idx, dtype=np.intp)
        if pos_idx.shape != tokens.shape[:-1]:
            raise DimensionError(f"{pos_idx.shape} position indices for tokens of shape {tokens.shape}")
        g2 = self.config.pos_grid**2
        if pos_idx.size and (pos_idx.min() < 0 or pos_idx.max() >= g2):
            raise ContractError(f"positional index outside [0, {g2})")
        x = tokens + ad.take_rows(self.positions.grid_embeddings, pos_idx)
        lead = tokens.shape[:-2]
        cls = ad.reshape(self.positions.cls_embedding, (1,) * len(lead) + (1, self.config.hidden_size))
        cls = ad.broadcast_to(cls, (*lead, 1, self.config.hidden_size))
        return ad.concat([cls, x], axis=-2)

    def __call__(self, patches, uv):
        """Encode ``(..., N, p, p, 3)`` patches with ``(..., N, 2)`` uv into ``(..., D)``."""
        pos_idx = positional_index(uv, self.config.pos_grid)
        x = self.assemble_sequence(self.embed_patches(patches), pos_idx)
        for layer in self.layers:
            x = layer(x)
        x = self.norm(x)
        return x[..., 0, :]

    encode = __call__
