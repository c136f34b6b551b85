"""Optimizer, learning-rate schedule, training loop and gradient verification."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from modiqa import autodiff as ad
from modiqa.data import DatasetManifest, ImageCache, SplitSpec, assemble_batches
from modiqa.encoder import ConfigError
from modiqa.losses import total_loss
from modiqa.metrics import UndefinedCorrelationError, srocc
from modiqa.sampling import SamplerConfig, build_probability_map, derive_rng, sample_patches

log = logging.getLogger(__name__)

# stream tags for derive_rng
_STREAM_SHUFFLE, _STREAM_TRAIN, _STREAM_VAL = 0, 1, 2


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""


class GradientCheckError(AssertionError):
    """Analytic and numerical gradients disagree."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 20
    patches_train: int = 256
    patches_eval: int = 1024
    epochs: int = 20
    lr_initial: float = 1e-5
    lr_decay_epoch: int = 12
    lr_decay_factor: float = 10.0
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    rank_eps: float = 1e-6
    rank_reduction: str = "mean"
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("batch_size", "patches_train", "patches_eval", "epochs", "lr_decay_epoch", "lr_decay_factor", "rank_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr_initial < 0 or self.weight_decay < 0:
            raise ConfigError("lr_initial and weight_decay must be nonnegative")
        if self.lr_decay_epoch > self.epochs:
            raise ConfigError("lr_decay_epoch must not exceed epochs")
        if self.rank_reduction not in ("mean", "sum"):
            raise ConfigError(f"rank_reduction must be mean or sum, got {self.rank_reduction!r}")

    def to_dict(self):
        return asdict(self)


def learning_rate(cfg: TrainConfig, epoch):
    """Step schedule; ``epoch`` counts from 1 and the decay applies from ``lr_decay_epoch`` on."""
    if epoch >= cfg.lr_decay_epoch:
        return cfg.lr_initial / cfg.lr_decay_factor
    return cfg.lr_initial


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, store, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.store.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0:
                continue
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_srocc: float
    lr: float


@dataclass
class TrainResult:
    history: list
    best_state: dict
    best_epoch: int
    best_val_srocc: float
    trained_on: frozenset = field(default_factory=frozenset)


def sample_batch(model, manifest, indices, images, sampler, n_patches, rngs):
    """Stack aligned patch sequences for a list of records."""
    refs, dists, uvs = [], [], []
    for i, rng in zip(indices, rngs):
        ref, dist = images.pair(manifest.records[i])
        pmap = build_probability_map(ref, dist, sampler)
        rs, ds = sample_patches(ref, dist, pmap, n_patches, rng)
        refs.append(rs.patches)
        dists.append(ds.patches)
        uvs.append(rs.uv)
    dtype = model.dtype
    return np.stack(refs).astype(dtype), np.stack(dists).astype(dtype), np.stack(uvs)


def predict_records(model, manifest, indices, images, sampler, n_patches, seed, stream=_STREAM_VAL, run=0, chunk=8):
    """Model scores for the given records, each sampled with its own derived rng."""
    out = np.empty(len(indices))
    with ad.no_grad():
        for start in range(0, len(indices), chunk):
            idx = indices[start : start + chunk]
            rngs = [derive_rng(seed, stream, run, i) for i in idx]
            r, d, uv = sample_batch(model, manifest, idx, images, sampler, n_patches, rngs)
            out[start : start + len(idx)] = model.forward(r, d, uv).data
    return out


def _validation_srocc(model, manifest, val_idx, targets, images, sampler, cfg, epoch):
    if len(val_idx) < 2:
        return float("nan")
    pred = predict_records(model, manifest, val_idx, images, sampler, cfg.patches_eval, cfg.seed, _STREAM_VAL, epoch)
    try:
        return srocc(pred, targets[val_idx])
    except UndefinedCorrelationError:
        return float("nan")


def train(model, manifest: DatasetManifest, split: SplitSpec, cfg: TrainConfig, sampler: SamplerConfig = None,
          images=None, on_epoch=None):
    """Train ``model`` in place on the training references of ``split``.

    Every visit to an image draws a fresh patch sample. After each epoch the
    validation SROCC is computed; the parameters with the best validation
    SROCC (the last epoch if there is no usable validation set) are returned
    in ``TrainResult.best_state`` and loaded back into the model.
    """
    sampler = sampler or SamplerConfig(patch_size=model.config.vit.patch_size)
    images = images or ImageCache()
    train_idx = manifest.subset(split.train)
    if not train_idx:
        raise ConfigError("training split is empty")
    val_idx = manifest.subset(split.val)
    targets = manifest.normalized_scores()
    store = model.store
    opt = AdamW(store, cfg.lr_initial, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps, cfg.weight_decay)

    history = []
    best = (-math.inf, 0, store.state_dict())
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = learning_rate(cfg, epoch)
        batches = assemble_batches(manifest, split, cfg.batch_size, derive_rng(cfg.seed, _STREAM_SHUFFLE, epoch))
        losses, weights = [], []
        for batch in batches:
            rngs = [derive_rng(cfg.seed, _STREAM_TRAIN, epoch, i) for i in batch.indices]
            r, d, uv = sample_batch(model, manifest, batch.indices, images, sampler, cfg.patches_train, rngs)
            pred = model.forward(r, d, uv)
            loss = total_loss(pred, targets[batch.indices], cfg.rank_eps, cfg.rank_reduction)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}")
            store.zero_grad()
            ad.backward(loss, store)
            opt.step()
            losses.append(value)
            weights.append(len(batch.indices))
        train_loss = float(np.average(losses, weights=weights))
        val = _validation_srocc(model, manifest, val_idx, targets, images, sampler, cfg, epoch)
        rec = EpochRecord(epoch, train_loss, val, opt.lr)
        history.append(rec)
        log.info("epoch %d loss %.6f val_srocc %.4f lr %g", epoch, train_loss, val, opt.lr)
        score = val if math.isfinite(val) else -math.inf
        if score > best[0] or (not math.isfinite(best[0]) and score == best[0]):
            best = (score, epoch, store.state_dict())
        if on_epoch is not None:
            on_epoch(rec, model)
    store.load_state_dict(best[2])
    return TrainResult(history, best[2], best[1], best[0], frozenset(split.train))


def write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_srocc", "lr"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_srocc), repr(rec.lr)])


# gradient verification


@dataclass
class GradientReport:
    groups: dict  # name -> (max relative error, max absolute error)
    tolerance: float

    @property
    def worst(self):
        return max(self.groups.items(), key=lambda kv: kv[1][0])

    @property
    def max_rel_error(self):
        return self.worst[1][0]

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def lines(self):
        for name, (rel, abs_) in self.groups.items():
            flag = "ok" if rel < self.tolerance else "FAIL"
            yield f"{flag:4s} {name:40s} rel={rel:.3e} abs={abs_:.3e}"


def random_gradcheck_batch(model, batch_size=3, n_patches=4, seed=0):
    """Random patches, uv and targets sized for ``model``."""
    rng = np.random.default_rng(seed)
    p = model.config.vit.patch_size
    shape = (batch_size, n_patches, p, p, 3)
    ref = rng.standard_normal(shape)
    dist = ref + 0.5 * rng.standard_normal(shape)
    uv = rng.random((batch_size, n_patches, 2))
    target = rng.random(batch_size)
    return ref, dist, uv, target


def relative_error(a, b, floor=1e-6):
    return np.abs(a - b) / (np.maximum(np.abs(a), np.abs(b)) + floor)


def gradient_check(model, batch, tolerance=1e-4, h=1e-5, fault=None, raise_on_fail=False):
    """Compare backpropagated gradients with central differences on every parameter.

    ``fault`` names a parameter whose analytic gradient is deliberately scaled
    by 1.5, to exercise the failure path.
    """
    if model.dtype != np.float64:
        raise ConfigError("gradient_check requires a float64 model")
    ref, dist, uv, target = batch

    def objective():
        with ad.no_grad():
            return float(total_loss(model.forward(ref, dist, uv), target).data)

    store = model.store
    store.zero_grad()
    ad.backward(total_loss(model.forward(ref, dist, uv), target), store)
    analytic = {n: p.grad.copy() for n, p in store.items()}
    if fault is not None:
        if fault not in analytic:
            raise KeyError(f"no parameter named {fault!r}")
        analytic[fault] = analytic[fault] * 1.5 + 1e-3
    numeric = ad.finite_diff_gradient(objective, store, h)
    groups = {}
    for name in store.names():
        a, n = analytic[name], numeric[name]
        groups[name] = (float(relative_error(a, n).max()), float(np.abs(a - n).max()))
    report = GradientReport(groups, tolerance)
    if raise_on_fail and not report.passed:
        name, (rel, _) = report.worst
        raise GradientCheckError(f"gradient mismatch in {name}: relative error {rel:.3e} >= {tolerance}")
    return report
