"""The full quality model: shared patch encoder + difference modulation head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from modiqa import autodiff as ad
from modiqa.diffnet import DiffNetConfig, DiffNetHead
from modiqa.encoder import ConfigError, PatchEncoder, ViTConfig
from modiqa.layers import Module
from modiqa.sampling import SamplerConfig, build_probability_map, sample_patches

CHECKPOINT_FORMAT = "modiqa-checkpoint-v1"


class CheckpointError(ValueError):
    """A checkpoint is unreadable or does not match the model."""


@dataclass(frozen=True)
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    diffnet: DiffNetConfig = field(default_factory=DiffNetConfig)
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.diffnet.n_rg and self.vit.hidden_size % self.diffnet.reduction and self.diffnet.attention == "ca":
            raise ConfigError(
                f"hidden_size {self.vit.hidden_size} not divisible by reduction {self.diffnet.reduction}"
            )

    def to_dict(self):
        return {"vit": self.vit.to_dict(), "diffnet": self.diffnet.to_dict(), "dtype": self.dtype, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"vit", "diffnet", "dtype", "seed"}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            vit = ViTConfig(**d.get("vit", {}))
            diff = DiffNetConfig(**d.get("diffnet", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(vit, diff, d.get("dtype", "float32"), int(d.get("seed", 0)))


PRESETS = {
    # patch 16, 6 of 12 base layers, 4 residual groups x 4 blocks
    "base-16-6-4-4": ModelConfig(ViTConfig(16, 768, 6, 12, 4, 14), DiffNetConfig(4, 4, 16)),
    "tiny": ModelConfig(ViTConfig(4, 16, 1, 2, 2, 4), DiffNetConfig(1, 1, 4), dtype="float64"),
    "toy": ModelConfig(ViTConfig(8, 64, 1, 4, 2, 4), DiffNetConfig(1, 2, 4)),
}


class QualityModel(Module):
    """Siamese encoder followed by DiffNet and an MLP regression head."""

    def __init__(self, config: ModelConfig = None):
        config = config or ModelConfig()
        self.config = config
        rng = np.random.default_rng(config.seed)
        dtype = np.dtype(config.dtype)
        self.encoder = PatchEncoder(config.vit, rng, dtype=dtype)
        self.head = DiffNetHead(config.vit.hidden_size, config.diffnet, rng, dtype=dtype)
        self.store = self.parameter_store()

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def encode(self, patches, uv):
        return self.encoder(patches, uv)

    def forward(self, ref_patches, dist_patches, uv):
        """Scores for ``(B, N, p, p, 3)`` patch stacks sharing ``(B, N, 2)`` uv."""
        # two same-shape calls: identical inputs give bit-identical features
        f_ref = self.encoder(ref_patches, uv)
        f_dist = self.encoder(dist_patches, uv)
        return self.head(f_ref, f_dist)

    __call__ = forward

    def predict_pair(self, ref, dist, n_patches, rng, sampler: SamplerConfig = None):
        """Score one normalized image pair with fresh patch sampling."""
        sampler = sampler or SamplerConfig(patch_size=self.config.vit.patch_size)
        if sampler.patch_size != self.config.vit.patch_size:
            raise ConfigError(f"sampler patch size {sampler.patch_size} != model patch size {self.config.vit.patch_size}")
        pmap = build_probability_map(ref, dist, sampler)
        rs, ds = sample_patches(ref, dist, pmap, n_patches, rng)
        with ad.no_grad():
            q = self.forward(rs.patches[None], ds.patches[None], rs.uv[None])
        return float(q.data[0])

    def parameter_counts(self):
        """Per-component parameter counts."""
        enc = self.encoder.num_parameters()
        pos = self.encoder.positions.num_parameters()
        diff = self.head.diffnet.num_parameters()
        head = self.head.head.num_parameters()
        return {
            "encoder": enc,
            "positional": pos,
            "diffnet": diff,
            "head": head,
            "total": enc + diff + head,
        }

    # checkpoints

    def save(self, path, extra=None):
        """Write a ``.npz`` holding a JSON header and one little-endian array per parameter."""
        header = {"format": CHECKPOINT_FORMAT, "model": self.config.to_dict(), "extra": extra or {}}
        arrays = {}
        for name, p in self.store.items():
            arrays[f"param/{name}"] = p.data.astype(p.data.dtype.newbyteorder("<"), copy=False)
        arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return path

    def load_state(self, path):
        header, state = read_checkpoint(path)
        if header["model"] != self.config.to_dict():
            raise CheckpointError(f"{path}: checkpoint model config differs from this model")
        try:
            self.store.load_state_dict(state)
        except ValueError as exc:
            raise CheckpointError(f"{path}: {exc}") from None
        return header

    @classmethod
    def from_checkpoint(cls, path):
        header, state = read_checkpoint(path)
        try:
            model = cls(ModelConfig.from_dict(header["model"]))
        except (ConfigError, KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: invalid model header ({exc})") from None
        try:
            model.store.load_state_dict(state)
        except ValueError as exc:
            raise CheckpointError(f"{path}: {exc}") from None
        return model, header


def read_checkpoint(path):
    """Return ``(header, {name: array})``; raise :class:`CheckpointError` on any defect."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            files = list(npz.files)
            if "__header__" not in files:
                raise CheckpointError(f"{path}: missing header")
            header = json.loads(bytes(npz["__header__"]).decode("utf-8"))
            state = {k[len("param/") :]: npz[k] for k in files if k.startswith("param/")}
    except CheckpointError:
        raise
    except Exception as exc:  # noqa: BLE001 - zip, json and numpy all raise their own types
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if header.get("format") != CHECKPOINT_FORMAT or "model" not in header:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    return header, state
