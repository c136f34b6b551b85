"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from modiqa import kernels
from modiqa.config import load_run_config, model_config_from_dict, output_dir_for
from modiqa.data import (
    DatasetManifest,
    ImageCache,
    ImageLoadError,
    ManifestError,
    SplitError,
    load_image_normalized,
    load_manifest,
    read_split,
    split_by_reference,
    write_split,
)
from modiqa.encoder import ConfigError
from modiqa.evaluation import ModelPredictor, cross_database_matrix, evaluate
from modiqa.metrics import FitError, UndefinedCorrelationError
from modiqa.model import PRESETS, CheckpointError, QualityModel
from modiqa.sampling import SamplerConfig, build_probability_map, derive_rng
from modiqa.training import (
    TrainingDiverged,
    gradient_check,
    random_gradcheck_batch,
    train,
    write_history,
)

log = logging.getLogger("modiqa")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

_USAGE_ERRORS = (
    ConfigError,
    ManifestError,
    SplitError,
    CheckpointError,
    ImageLoadError,
    FileNotFoundError,
    UndefinedCorrelationError,
    FitError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _architecture(model_dict):
    return {k: v for k, v in model_dict.items() if k != "seed"}


def _load_dataset(cfg, manifest_override=None, name=None):
    path = manifest_override or cfg.data.manifest
    if path is None:
        raise ConfigError("no dataset manifest given (data.manifest or --manifest)")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset manifest does not exist: {path}")
    if name is None and manifest_override is None:
        name = cfg.data.name
    return load_manifest(path, name=name, score_direction=cfg.data.score_direction)


def _split_for(cfg, manifest):
    if cfg.data.split is not None:
        split = read_split(cfg.data.split)
        missing = set(manifest.reference_ids) - (split.train | split.val | split.test)
        if missing:
            raise SplitError(f"split file does not cover references {sorted(missing)[:5]}")
        return split
    return split_by_reference(manifest, cfg.data.fractions, cfg.seed)


def _run_config(args, require_data=False):
    cfg = load_run_config(getattr(args, "config", None), require_data=require_data)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _sampler_from_header(header, patch_size):
    raw = header.get("extra", {}).get("sampler")
    if raw:
        return SamplerConfig(**raw)
    return SamplerConfig(patch_size=patch_size)


def cmd_train(args):
    cfg = _run_config(args, require_data=True)
    if args.epochs is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs,
                                           lr_decay_epoch=min(cfg.train.lr_decay_epoch, args.epochs))
        )
    out = output_dir_for(cfg, "train", args.output_dir)
    manifest = _load_dataset(cfg)
    split = _split_for(cfg, manifest)
    write_split(out / "split.txt", split)
    model = QualityModel(cfg.model)
    extra = {
        "sampler": cfg.sampler.to_dict(),
        "dataset": manifest.name,
        "trained_on": sorted(f"{manifest.name}:{r}" for r in split.train),
    }

    history = []

    def on_epoch(rec, m):
        history.append(rec)
        if cfg.train.checkpoint_every and rec.epoch % cfg.train.checkpoint_every == 0:
            m.save(out / f"epoch_{rec.epoch:03d}.npz", {**extra, "epoch": rec.epoch})
        if rec.epoch == cfg.train.epochs:
            m.save(out / "last.npz", {**extra, "epoch": rec.epoch})
        print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.5f}  val_srocc {rec.val_srocc:.4f}  lr {rec.lr:g}")

    try:
        result = train(model, manifest, split, cfg.train, cfg.sampler, ImageCache(), on_epoch)
    except TrainingDiverged as exc:
        write_history(out / "history.csv", history)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    write_history(out / "history.csv", result.history)
    model.save(out / "best.npz", {**extra, "epoch": result.best_epoch})
    print(f"best epoch {result.best_epoch} (val SROCC {result.best_val_srocc:.4f}); outputs in {out}")
    return EXIT_OK


def _load_checkpoint(path, cfg=None):
    model, header = QualityModel.from_checkpoint(path)
    if cfg is not None and cfg.source is not None:
        if _architecture(header["model"]) != _architecture(cfg.model.to_dict()):
            raise CheckpointError(f"{path}: architecture differs from config {cfg.source}")
    return model, header


def cmd_eval(args):
    cfg = _run_config(args)
    model, header = _load_checkpoint(args.checkpoint, cfg)
    sampler = _sampler_from_header(header, model.config.vit.patch_size)
    manifest = _load_dataset(cfg, args.manifest, args.dataset_name)
    runs = args.runs if args.runs is not None else cfg.eval.runs
    n_patches = args.n_patches if args.n_patches is not None else cfg.eval.n_patches
    if args.cross_db:
        trained = set(header.get("extra", {}).get("trained_on", []))
        reports = cross_database_matrix({header.get("extra", {}).get("dataset", "model"): (ModelPredictor(model, sampler), trained)},
                                        [manifest], None, n_patches=n_patches, runs=runs, seed=cfg.seed)
        report = next(iter(reports.values()))
    else:
        split = _split_for(cfg, manifest)
        indices = manifest.subset(split.test)
        if not indices:
            raise ConfigError("the test split is empty; use --cross-db to score the whole dataset")
        report = evaluate(ModelPredictor(model, sampler), manifest, indices, n_patches, runs, cfg.seed)
    out = output_dir_for(cfg, "eval", args.output_dir)
    report.write_csv(out / "report.csv")
    print(report.table())
    return EXIT_OK


def cmd_crossdb(args):
    cfg = _run_config(args)
    predictors = {}
    for item in args.checkpoint:
        name, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--checkpoint expects NAME=PATH, got {item!r}")
        model, header = _load_checkpoint(path)
        predictors[name] = (ModelPredictor(model, _sampler_from_header(header, model.config.vit.patch_size)),
                            set(header.get("extra", {}).get("trained_on", [])))
    manifests = []
    for item in args.dataset:
        name, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--dataset expects NAME=PATH, got {item!r}")
        if not Path(path).exists():
            raise ConfigError(f"dataset manifest does not exist: {path}")
        manifests.append(load_manifest(path, name=name))
    out = output_dir_for(cfg, "crossdb", args.output_dir)
    runs = args.runs if args.runs is not None else cfg.eval.runs
    n_patches = args.n_patches if args.n_patches is not None else cfg.eval.n_patches
    reports = cross_database_matrix(predictors, manifests, out / "crossdb_srocc.csv",
                                    n_patches=n_patches, runs=runs, seed=cfg.seed)
    with open(out / "crossdb_long.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trained_on", "tested_on", "plcc", "srocc", "krocc", "n_images", "runs"])
        for (a, b), r in reports.items():
            writer.writerow([a, b, repr(r.plcc), repr(r.srocc), repr(r.krocc), r.n_images, r.runs])
    names = [m.name for m in manifests]
    print("trained_on/tested_on " + " ".join(f"{n:>10s}" for n in names))
    for a in predictors:
        print(f"{a:20s} " + " ".join(f"{reports[(a, n)].srocc:10.4f}" for n in names))
    return EXIT_OK


def cmd_predict(args):
    model, header = _load_checkpoint(args.checkpoint)
    sampler = _sampler_from_header(header, model.config.vit.patch_size)
    ref = load_image_normalized(args.ref)
    dist = load_image_normalized(args.dist)
    if ref.shape != dist.shape:
        raise ConfigError(f"image sizes differ: {ref.shape[:2]} vs {dist.shape[:2]}")
    score = model.predict_pair(ref, dist, args.n_patches, derive_rng(args.seed, 0), sampler)
    print(repr(score))
    return EXIT_OK


def cmd_sample_map(args):
    cfg = _run_config(args)
    overrides = {k: getattr(args, k) for k in ("alpha", "beta", "gamma", "sigma_center", "diff_metric", "patch_size")
                 if getattr(args, k) is not None}
    sampler = dataclasses.replace(cfg.sampler, **overrides)
    ref = load_image_normalized(args.ref)
    dist = load_image_normalized(args.dist)
    if ref.shape != dist.shape:
        raise ConfigError(f"image sizes differ: {ref.shape[:2]} vs {dist.shape[:2]}")
    pmap = build_probability_map(ref, dist, sampler)
    out = output_dir_for(cfg, "sample-map", args.output_dir)
    grid = pmap.grid
    with open(out / "pmap.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])
    img = np.round(255.0 * grid / grid.max()).astype(np.uint8)
    Image.fromarray(img, mode="L").save(out / "pmap.png")
    print(f"wrote {out / 'pmap.png'} and {out / 'pmap.csv'} ({grid.shape[0]}x{grid.shape[1]} positions)")
    return EXIT_OK


def _model_config_for_counts(args):
    if args.preset is not None:
        return PRESETS[args.preset]
    if args.config is not None:
        return load_run_config(args.config).model
    return PRESETS["base-16-6-4-4"]


def cmd_param_count(args):
    cfg = _model_config_for_counts(args)
    cfg = dataclasses.replace(cfg, dtype="float32")
    counts = QualityModel(cfg).parameter_counts()
    for key in ("encoder", "positional", "diffnet", "head", "total"):
        label = f"{key} (within encoder)" if key == "positional" else key
        print(f"{label:28s} {counts[key]:>12,d}  ({counts[key] / 1e6:.2f}M)")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.config is not None:
        cfg = load_run_config(args.config)
        model_cfg = dataclasses.replace(cfg.model, dtype="float64")
    else:
        model_cfg = PRESETS["tiny"]
    model_cfg = dataclasses.replace(model_cfg, seed=args.seed)
    model = QualityModel(model_cfg)
    batch = random_gradcheck_batch(model, args.batch_size, args.n_patches, args.seed)
    fault = None
    if args.inject_fault:
        fault = model.store.names()[0] if args.inject_fault == "auto" else args.inject_fault
        if fault not in model.store:
            raise ConfigError(f"no parameter named {fault!r}")
    report = gradient_check(model, batch, args.tolerance, args.step, fault=fault)
    for line in report.lines():
        print(line)
    name, (rel, _) = report.worst
    print(f"max relative error {rel:.3e} in {name} (tolerance {args.tolerance:g}, {len(report.groups)} parameter groups)")
    if not report.passed:
        print(f"FAILED: worst offender {name}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="modiqa", description="Transformer-based full-reference image quality assessment.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split (or a whole dataset with --cross-db)")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--dataset-name", help="dataset name used to match the checkpoint's training references")
    p.add_argument("--cross-db", action="store_true", help="treat the dataset as fully unseen")
    p.add_argument("--runs", type=int)
    p.add_argument("--n-patches", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossdb", help="evaluate several checkpoints on several datasets")
    p.add_argument("--config")
    p.add_argument("--checkpoint", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--dataset", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--runs", type=int)
    p.add_argument("--n-patches", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_crossdb)

    p = sub.add_parser("predict", help="score one reference/distorted pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("ref")
    p.add_argument("dist")
    p.add_argument("--n-patches", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sample-map", help="write the patch sampling map as PNG and CSV")
    p.add_argument("ref")
    p.add_argument("dist")
    p.add_argument("--config")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--sigma-center", type=float)
    p.add_argument("--diff-metric", choices=("mse", "ssim_local"))
    p.add_argument("--patch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_sample_map)

    p = sub.add_parser("gradcheck", help="compare backprop with finite differences on a small model")
    p.add_argument("--config")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=3)
    p.add_argument("--n-patches", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", nargs="?", const="auto", metavar="PARAM",
                   help="corrupt the analytic gradient of PARAM (default: the first parameter)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("param-count", help="print parameter counts per component")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--config")
    group.add_argument("--preset", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    log.debug("kernel backend: %s", kernels.BACKEND)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
