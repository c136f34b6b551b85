"""Evaluation drivers: correlation reports, cross-database matrices, representation stability."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from modiqa import autodiff as ad
from modiqa.data import DatasetManifest, ImageCache
from modiqa.encoder import ConfigError
from modiqa.metrics import UndefinedCorrelationError, krocc, logistic_fit, plcc, srocc
from modiqa.sampling import (
    SamplerConfig,
    build_probability_map,
    derive_rng,
    sample_patches,
    tile_patches,
)

_STREAM_EVAL = 3


@dataclass
class CorrelationReport:
    plcc: float
    srocc: float
    krocc: float
    logistic_params: tuple
    n_images: int
    runs: int
    per_run: list = field(default_factory=list)  # (plcc, srocc, krocc) per run
    dataset: str = ""

    def rows(self):
        yield ["run", "plcc", "srocc", "krocc"]
        for i, (p, s, k) in enumerate(self.per_run):
            yield [i, repr(p), repr(s), repr(k)]
        yield ["mean", repr(self.plcc), repr(self.srocc), repr(self.krocc)]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in self.rows():
                writer.writerow(row)

    def table(self):
        head = f"{self.dataset or 'dataset'}: {self.n_images} images, {self.runs} run(s)"
        return "\n".join(
            [
                head,
                f"  PLCC  {self.plcc:.4f}",
                f"  SROCC {self.srocc:.4f}",
                f"  KROCC {self.krocc:.4f}",
                "  logistic " + " ".join(f"{b:.4g}" for b in self.logistic_params),
            ]
        )


def correlation_summary(pred, target):
    """``(plcc after logistic fit, srocc, krocc, logistic params)`` for one run."""
    s = srocc(pred, target)
    k = krocc(pred, target)
    if len(pred) >= 5:
        fit = logistic_fit(pred, target)
        p = plcc(fit.mapped, target)
        params = tuple(float(b) for b in fit.params)
    else:
        p = plcc(pred, target)
        params = (float("nan"),) * 4
    return p, s, k, params


class ModelPredictor:
    """Adapter scoring image pairs with a :class:`~modiqa.model.QualityModel`."""

    def __init__(self, model, sampler: SamplerConfig = None):
        self.model = model
        self.sampler = sampler or SamplerConfig(patch_size=model.config.vit.patch_size)

    def __call__(self, ref, dist, n_patches, rng):
        return self.model.predict_pair(ref, dist, n_patches, rng, self.sampler)


def evaluate(predictor, manifest: DatasetManifest, indices=None, n_patches=1024, runs=20, seed=0, images=None):
    """Mean PLCC (post-fit), SROCC and KROCC over ``runs`` independent samplings.

    ``predictor(ref, dist, n_patches, rng) -> float`` scores one normalized pair;
    :class:`ModelPredictor` wraps a trained model. The logistic map is refit per
    run. Each record's rng derives from ``(seed, run, record index)``, so results
    do not depend on the order of ``indices``.
    """
    if not callable(predictor):
        predictor = ModelPredictor(predictor)
    indices = list(range(len(manifest.records))) if indices is None else sorted(indices)
    if not indices:
        raise ConfigError("evaluation set is empty")
    if runs < 1:
        raise ConfigError("runs must be at least 1")
    images = images or ImageCache()
    target = manifest.normalized_scores()[indices]
    per_run, params = [], []
    for run in range(runs):
        pred = np.empty(len(indices))
        for j, i in enumerate(indices):
            ref, dist = images.pair(manifest.records[i])
            pred[j] = predictor(ref, dist, n_patches, derive_rng(seed, _STREAM_EVAL, run, i))
        p, s, k, beta = correlation_summary(pred, target)
        per_run.append((p, s, k))
        params.append(beta)
    arr = np.array(per_run)
    return CorrelationReport(
        plcc=float(arr[:, 0].mean()),
        srocc=float(arr[:, 1].mean()),
        krocc=float(arr[:, 2].mean()),
        logistic_params=tuple(float(b) for b in np.mean(params, axis=0)),
        n_images=len(indices),
        runs=runs,
        per_run=per_run,
        dataset=manifest.name,
    )


def cross_database_evaluate(predictor, manifest: DatasetManifest, trained_on=frozenset(), **kwargs):
    """Evaluate on every record of ``manifest``, refusing references the model trained on.

    ``trained_on`` holds the reference ids the model saw during training, tagged
    by dataset name as ``"name:ref_id"`` or bare ids for the same dataset.
    """
    seen = {t.split(":", 1)[1] for t in trained_on if t.startswith(f"{manifest.name}:")}
    leaked = seen & set(manifest.reference_ids)
    if leaked:
        raise ConfigError(f"{len(leaked)} references of {manifest.name!r} were used in training")
    return evaluate(predictor, manifest, None, **kwargs)


def cross_database_matrix(predictors, manifests, path=None, **kwargs):
    """Evaluate each named predictor on each dataset; optionally write an SROCC matrix CSV.

    ``predictors`` maps a training-set name to ``(predictor, trained_on)``.
    """
    reports = {}
    for a, (pred, trained_on) in predictors.items():
        for m in manifests:
            reports[(a, m.name)] = cross_database_evaluate(pred, m, trained_on, **kwargs)
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["trained_on", *[m.name for m in manifests]])
            for a in predictors:
                writer.writerow([a, *[f"{reports[(a, m.name)].srocc:.6f}" for m in manifests]])
    return reports


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedCorrelationError("cosine similarity undefined for a zero vector")
    return float(a @ b / (na * nb))


def mean_pairwise_cosine(vectors):
    sims = [_cosine(vectors[i], vectors[j]) for i, j in itertools.combinations(range(len(vectors)), 2)]
    return float(np.mean(sims))


def representation_stability(model, image, n_patches, trials=128, reference=None, sampler=None, seed=0, mode="sample"):
    """Mean pairwise cosine similarity of encodings over ``trials`` fresh patch samples.

    ``reference`` supplies the other image of the pair for the difference term of
    the sampling map (defaults to ``image`` itself, which removes that term).
    ``mode="tile"`` encodes the deterministic tiling instead of sampling.
    """
    if trials < 2:
        raise ConfigError("need at least two trials")
    p = model.config.vit.patch_size
    sampler = sampler or SamplerConfig(patch_size=p)
    reference = image if reference is None else reference
    vecs = []
    with ad.no_grad():
        if mode == "tile":
            seq = tile_patches(image, p)
            for _ in range(trials):
                vecs.append(model.encode(seq.patches.astype(model.dtype), seq.uv).data)
        else:
            pmap = build_probability_map(reference, image, sampler)
            for t in range(trials):
                _, seq = sample_patches(reference, image, pmap, n_patches, derive_rng(seed, t))
                vecs.append(model.encode(seq.patches.astype(model.dtype), seq.uv).data)
    return mean_pairwise_cosine(np.asarray(vecs, dtype=np.float64))
