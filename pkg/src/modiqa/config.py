"""YAML run configuration binding model, sampler, training, data and evaluation settings."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from modiqa.data import ScoreDirection
from modiqa.diffnet import DiffNetConfig
from modiqa.encoder import ConfigError, ViTConfig
from modiqa.model import PRESETS, ModelConfig
from modiqa.sampling import SamplerConfig
from modiqa.training import TrainConfig

OUTPUT_ROOT_ENV = "MODIQA_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "modiqa-runs"

_TOP_KEYS = {"seed", "output_dir", "precision", "model", "sampler", "train", "data", "eval"}
_MODEL_KEYS = {"preset", "vit", "diffnet"}
_DATA_KEYS = {"manifest", "name", "score_direction", "split", "fractions"}
_EVAL_KEYS = {"runs", "n_patches"}


@dataclass(frozen=True)
class DataConfig:
    manifest: Path = None
    name: str = None
    score_direction: str = ScoreDirection.HIGHER_IS_BETTER.value
    split: Path = None
    fractions: tuple = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class EvalConfig:
    runs: int = 20
    n_patches: int = 1024


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: Path = None
    seed: int = 0
    source: Path = None

    def with_seed(self, seed):
        """Same config with every seed replaced by ``seed``."""
        return dataclasses.replace(
            self,
            seed=int(seed),
            model=dataclasses.replace(self.model, seed=int(seed)),
            train=dataclasses.replace(self.train, seed=int(seed)),
        )


def _reject_unknown(section, data, allowed):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _build(cls, section, data):
    data = data or {}
    allowed = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(section, data, allowed)
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def model_config_from_dict(data, precision=None, seed=0):
    data = data or {}
    _reject_unknown("model", data, _MODEL_KEYS)
    base = ModelConfig()
    if "preset" in data:
        if data["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {data['preset']!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[data["preset"]]
    vit = dataclasses.asdict(base.vit)
    vit.update(data.get("vit") or {})
    diff = base.diffnet.to_dict()
    diff.update(data.get("diffnet") or {})
    return ModelConfig(
        _build(ViTConfig, "model.vit", vit),
        _build(DiffNetConfig, "model.diffnet", diff),
        dtype=precision or base.dtype,
        seed=int(seed),
    )


def _resolve(base, value, must_exist=True, what="path"):
    if value is None:
        return None
    path = Path(value)
    if not path.is_absolute():
        path = base / path
    if must_exist and not path.exists():
        raise ConfigError(f"{what} does not exist: {path}")
    return path


def load_run_config(path=None, require_data=False):
    """Parse a YAML run config; unknown keys and missing referenced files are errors."""
    raw = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file does not exist: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        base = path.parent
    _reject_unknown("<top>", raw, _TOP_KEYS)
    seed = int(raw.get("seed", 0))
    model = model_config_from_dict(raw.get("model"), raw.get("precision"), seed)
    sampler_raw = dict(raw.get("sampler") or {})
    _reject_unknown("sampler", sampler_raw, {f.name for f in dataclasses.fields(SamplerConfig)})
    if sampler_raw.get("patch_size", model.vit.patch_size) != model.vit.patch_size:
        raise ConfigError("sampler.patch_size must equal model patch size")
    sampler_raw["patch_size"] = model.vit.patch_size
    sampler = _build(SamplerConfig, "sampler", sampler_raw)
    train_raw = dict(raw.get("train") or {})
    train_raw.setdefault("seed", seed)
    train = _build(TrainConfig, "train", train_raw)

    data_raw = dict(raw.get("data") or {})
    _reject_unknown("data", data_raw, _DATA_KEYS)
    if require_data and "manifest" not in data_raw:
        raise ConfigError("data.manifest is required")
    try:
        direction = ScoreDirection(data_raw.get("score_direction", ScoreDirection.HIGHER_IS_BETTER.value)).value
    except ValueError:
        raise ConfigError(f"invalid score_direction {data_raw.get('score_direction')!r}") from None
    data = DataConfig(
        manifest=_resolve(base, data_raw.get("manifest"), what="dataset manifest"),
        name=data_raw.get("name"),
        score_direction=direction,
        split=_resolve(base, data_raw.get("split"), what="split file"),
        fractions=tuple(data_raw.get("fractions", (0.6, 0.2, 0.2))),
    )
    evaluation = _build(EvalConfig, "eval", raw.get("eval"))
    out = raw.get("output_dir")
    output_dir = _resolve(base, out, must_exist=False) if out is not None else None
    return RunConfig(model, sampler, train, data, evaluation, output_dir, seed, path)


def output_dir_for(cfg: RunConfig, command, override=None):
    """Flag override, then config value, then ``$MODIQA_OUTPUT_ROOT/<command>``."""
    if override is not None:
        out = Path(override)
    elif cfg is not None and cfg.output_dir is not None:
        out = cfg.output_dir
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / command
    out.mkdir(parents=True, exist_ok=True)
    return out
