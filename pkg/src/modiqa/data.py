"""Dataset manifests, reference-wise splits, image loading and score preprocessing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_HEADER = ("ref_path", "dist_path", "score", "ref_id")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ManifestError(ValueError):
    """A manifest file is empty or malformed."""


class SplitError(ValueError):
    """Invalid split request or a leaked reference."""


class ImageLoadError(IOError):
    """An image could not be decoded as 8-bit RGB."""


class ScoreDirection(str, Enum):
    HIGHER_IS_BETTER = "higher_is_better"
    LOWER_IS_BETTER = "lower_is_better"


@dataclass(frozen=True)
class ImageRecord:
    reference_path: Path
    distorted_path: Path
    score: float
    reference_id: str


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    records: tuple
    score_direction: ScoreDirection = ScoreDirection.HIGHER_IS_BETTER

    def __post_init__(self):
        if not self.records:
            raise ManifestError(f"manifest {self.name!r} has no records")

    def __len__(self):
        return len(self.records)

    @property
    def reference_ids(self):
        """Distinct reference ids in first-seen order."""
        return list(dict.fromkeys(r.reference_id for r in self.records))

    def normalized_scores(self):
        """Scores mapped linearly to [0, 1] with higher meaning better quality."""
        s = np.array([r.score for r in self.records], dtype=np.float64)
        if self.score_direction == ScoreDirection.LOWER_IS_BETTER:
            s = -s
        lo, hi = s.min(), s.max()
        if hi == lo:
            return np.full_like(s, 0.5)
        return (s - lo) / (hi - lo)

    def subset(self, reference_ids):
        keep = set(reference_ids)
        return [i for i, r in enumerate(self.records) if r.reference_id in keep]


@dataclass(frozen=True)
class SplitSpec:
    train: frozenset
    val: frozenset
    test: frozenset
    seed: int = 0

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise SplitError("split subsets overlap")

    def subset_of(self, reference_id):
        for name in ("train", "val", "test"):
            if reference_id in getattr(self, name):
                return name
        raise SplitError(f"reference {reference_id!r} is not in the split")

    def counts(self):
        return len(self.train), len(self.val), len(self.test)


@dataclass(frozen=True)
class NormalizationSpec:
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD


def load_manifest(path, name=None, score_direction=ScoreDirection.HIGHER_IS_BETTER):
    """Read a ``ref_path,dist_path,score,ref_id`` CSV; relative paths resolve against its folder."""
    path = Path(path)
    base = path.parent
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: empty manifest")
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            ref, dist, score, ref_id = (c.strip() for c in row)
            try:
                value = float(score)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: score {score!r} is not numeric") from None
            if not math.isfinite(value):
                raise ManifestError(f"{path}:{lineno}: score {score!r} is not finite")
            if not ref_id:
                raise ManifestError(f"{path}:{lineno}: empty ref_id")
            records.append(ImageRecord(base / ref, base / dist, value, ref_id))
    if not records:
        raise ManifestError(f"{path}: empty manifest")
    return DatasetManifest(name or path.stem, tuple(records), ScoreDirection(score_direction))


def write_manifest(path, records):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.reference_path, r.distorted_path, repr(float(r.score)), r.reference_id])


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def split_by_reference(manifest_or_ids, fractions=(0.6, 0.2, 0.2), seed=0):
    """Random split along reference images.

    Validation and test receive ``round(fraction * n_refs)`` references each and
    the remainder goes to training.
    """
    if isinstance(manifest_or_ids, DatasetManifest):
        ids = manifest_or_ids.reference_ids
    else:
        ids = list(dict.fromkeys(manifest_or_ids))
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(ids)
    if n < 3:
        raise SplitError(f"need at least 3 reference images, got {n}")
    n_val = _round_half_up(fractions[1] * n)
    n_test = _round_half_up(fractions[2] * n)
    n_train = n - n_val - n_test
    if n_train < 0:
        raise SplitError(f"fractions {fractions} leave no training references")
    order = np.random.default_rng(seed).permutation(sorted(ids))
    return SplitSpec(
        train=frozenset(order[:n_train].tolist()),
        val=frozenset(order[n_train : n_train + n_val].tolist()),
        test=frozenset(order[n_train + n_val :].tolist()),
        seed=int(seed),
    )


def write_split(path, split: SplitSpec):
    lines = [f"# seed {split.seed}"]
    for name in ("train", "val", "test"):
        lines.append(f"[{name}]")
        lines.extend(sorted(getattr(split, name)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split(path):
    subsets = {"train": set(), "val": set(), "test": set()}
    current = None
    seed = 0
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("# seed"):
            seed = int(line.split()[-1])
        elif line.startswith("#"):
            continue
        elif line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in subsets:
                raise SplitError(f"{path}: unknown subset {current!r}")
        elif current is None:
            raise SplitError(f"{path}: id {line!r} outside any subset")
        else:
            subsets[current].add(line)
    return SplitSpec(frozenset(subsets["train"]), frozenset(subsets["val"]), frozenset(subsets["test"]), seed)


def read_rgb8(path):
    """Decode an image file to a ``(H, W, 3)`` uint8 array."""
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode == "P":
                img = img.convert("RGB")
                mode = "RGB"
            if mode != "RGB":
                raise ImageLoadError(f"{path}: expected an RGB image, got mode {mode}")
            return np.asarray(img, dtype=np.uint8)
    except ImageLoadError:
        raise
    except (OSError, ValueError) as exc:
        raise ImageLoadError(f"{path}: cannot decode image ({exc})") from exc


def normalize(rgb8, norm=NormalizationSpec()):
    rgb8 = np.asarray(rgb8)
    if rgb8.ndim != 3 or rgb8.shape[2] != 3:
        raise ImageLoadError(f"expected (H, W, 3) image, got shape {rgb8.shape}")
    mean = np.asarray(norm.mean, dtype=np.float64)
    std = np.asarray(norm.std, dtype=np.float64)
    return (rgb8.astype(np.float64) / 255.0 - mean) / std


def denormalize(image, norm=NormalizationSpec()):
    """Inverse of :func:`normalize`, returning values on the 0-255 scale (float)."""
    mean = np.asarray(norm.mean, dtype=np.float64)
    std = np.asarray(norm.std, dtype=np.float64)
    return (np.asarray(image) * std + mean) * 255.0


def load_image_normalized(path, norm=NormalizationSpec()):
    return normalize(read_rgb8(path), norm)


class ImageCache:
    """Loads and normalizes images once per path."""

    def __init__(self, norm=NormalizationSpec()):
        self.norm = norm
        self._cache = {}

    def __call__(self, path):
        key = str(path)
        img = self._cache.get(key)
        if img is None:
            img = load_image_normalized(path, self.norm)
            self._cache[key] = img
        return img

    def pair(self, record: ImageRecord):
        ref, dist = self(record.reference_path), self(record.distorted_path)
        if ref.shape != dist.shape:
            raise ImageLoadError(
                f"reference {record.reference_path} and distorted {record.distorted_path} differ in size: "
                f"{ref.shape[:2]} vs {dist.shape[:2]}"
            )
        return ref, dist


def average_ranks(values):
    """1-based ranks with ties sharing their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    ranks = np.empty(v.size, dtype=np.float64)
    boundaries = np.flatnonzero(np.diff(sv) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [v.size]))
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def histogram_equalize_scores(scores):
    """Map scores to ``(rank - 0.5) / n`` in input order, ties sharing the average rank."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("need at least one score")
    return (average_ranks(s) - 0.5) / s.size


@dataclass
class Batch:
    """Record indices of one training batch with their subset tags."""

    indices: list
    subsets: list = field(default_factory=list)


def assemble_batches(manifest: DatasetManifest, split: SplitSpec, batch_size, rng):
    """Shuffled training batches; raises if a non-training record slips in."""
    train_idx = np.array(manifest.subset(split.train), dtype=np.intp)
    order = rng.permutation(train_idx)
    batches = []
    for start in range(0, order.size, batch_size):
        idx = order[start : start + batch_size].tolist()
        tags = [split.subset_of(manifest.records[i].reference_id) for i in idx]
        if any(t != "train" for t in tags):
            raise SplitError(f"non-training record in batch: {tags}")
        batches.append(Batch(idx, tags))
    return batches
