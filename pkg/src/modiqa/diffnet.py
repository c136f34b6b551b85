"""Difference modulation network and regression head.

The signed difference between the two encoded images is rescaled by stacked
residual groups of residual channel-attention blocks and regressed to one
quality score by a small MLP.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from modiqa import autodiff as ad
from modiqa.autodiff import DimensionError
from modiqa.encoder import ConfigError
from modiqa.layers import Linear, Module


@dataclass(frozen=True)
class DiffNetConfig:
    n_rg: int = 4
    n_rcab: int = 4
    reduction: int = 16
    head_widths: tuple = field(default=None)
    # "ca": channel attention; "fc": attention replaced by an affine map (ablation)
    attention: str = "ca"
    # "input": U(x) * CA(x); "transformed": U(x) * Attention(U(x))
    ca_input: str = "input"
    difference: str = "signed"

    def __post_init__(self):
        if self.n_rg < 0 or self.n_rcab < 0 or self.reduction < 1:
            raise ConfigError(f"invalid DiffNet sizes: {self}")
        if self.n_rg >= 1 and self.n_rcab < 1:
            raise ConfigError("each residual group needs at least one block")
        if self.attention not in ("ca", "fc"):
            raise ConfigError(f"unknown attention kind {self.attention!r}")
        if self.ca_input not in ("input", "transformed"):
            raise ConfigError(f"unknown ca_input {self.ca_input!r}")
        if self.difference not in ("signed", "absolute"):
            raise ConfigError(f"unknown difference kind {self.difference!r}")
        if self.head_widths is not None:
            object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))

    def widths_for(self, dim):
        if self.head_widths is not None:
            return self.head_widths
        return (max(dim // 2, 1), max(dim // 4, 1))

    def to_dict(self):
        d = asdict(self)
        if d["head_widths"] is not None:
            d["head_widths"] = list(d["head_widths"])
        return d


def feature_difference(f_ref, f_dist):
    """Signed elementwise ``f_ref - f_dist``."""
    if f_ref.shape != f_dist.shape:
        raise DimensionError(f"feature shapes differ: {f_ref.shape} vs {f_dist.shape}")
    return ad.sub(f_ref, f_dist)


class ChannelAttention(Module):
    """Squeeze-excitation gating of a feature vector (the squeeze is the identity)."""

    def __init__(self, dim, reduction, rng, dtype=np.float64):
        if dim % reduction:
            raise ConfigError(f"dimension {dim} not divisible by reduction {reduction}")
        self.squeeze = Linear(dim, dim // reduction, rng, init="fan_in", dtype=dtype)
        self.excite = Linear(dim // reduction, dim, rng, init="fan_in", dtype=dtype)

    def weights(self, x):
        return ad.sigmoid(self.excite(ad.gelu(self.squeeze(x))))

    def __call__(self, x):
        return x * self.weights(x)


class AffineGate(Module):
    """Ablation stand-in for channel attention: a plain affine map."""

    def __init__(self, dim, rng, dtype=np.float64):
        self.fc = Linear(dim, dim, rng, init="fan_in", dtype=dtype)

    def weights(self, x):
        return self.fc(x)

    def __call__(self, x):
        return self.fc(x)


class RCAB(Module):
    """``x + U(x) * CA(x)``."""

    def __init__(self, dim, cfg, rng, dtype=np.float64):
        self.transform = Linear(dim, dim, rng, init="fan_in", dtype=dtype)
        if cfg.attention == "ca":
            self.attention = ChannelAttention(dim, cfg.reduction, rng, dtype=dtype)
        else:
            self.attention = AffineGate(dim, rng, dtype=dtype)
        self.ca_input = cfg.ca_input

    def __call__(self, x):
        u = self.transform(x)
        if self.ca_input == "input":
            return x + u * self.attention(x)
        return x + u * self.attention.weights(u)


class ResidualGroup(Module):
    """``x + U_RG(RCAB_n(...RCAB_1(x)))``."""

    def __init__(self, dim, cfg, rng, dtype=np.float64):
        self.blocks = [RCAB(dim, cfg, rng, dtype=dtype) for _ in range(cfg.n_rcab)]
        self.transform = Linear(dim, dim, rng, init="fan_in", dtype=dtype)

    def __call__(self, x):
        y = x
        for block in self.blocks:
            y = block(y)
        return x + self.transform(y)


class DiffNet(Module):
    """Chained residual groups with no outer skip."""

    def __init__(self, dim, cfg, rng, dtype=np.float64):
        self.groups = [ResidualGroup(dim, cfg, rng, dtype=dtype) for _ in range(cfg.n_rg)]

    def __call__(self, x):
        for group in self.groups:
            x = group(x)
        return x


class QualityHead(Module):
    """MLP regressing the modulated difference to a scalar."""

    def __init__(self, dim, widths, rng, dtype=np.float64):
        sizes = [dim, *widths, 1]
        self.layers = [Linear(a, b, rng, init="fan_in", dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = ad.gelu(layer(x))
        out = self.layers[-1](x)
        return ad.reshape(out, out.shape[:-1])


class DiffNetHead(Module):
    """DiffNet followed by the regression MLP."""

    def __init__(self, dim, cfg: DiffNetConfig, rng=None, dtype=np.float64):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = cfg
        self.diffnet = DiffNet(dim, cfg, rng, dtype=dtype)
        self.head = QualityHead(dim, cfg.widths_for(dim), rng, dtype=dtype)

    def __call__(self, f_ref, f_dist):
        diff = feature_difference(f_ref, f_dist)
        if self.config.difference == "absolute":
            diff = ad.tabs(diff)
        return self.head(self.diffnet(diff))

    predict_quality = __call__
