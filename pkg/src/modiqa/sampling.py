"""Context-aware patch sampling.

Patch centres are drawn from a probability map over every valid patch
position (patches never cross the image border). The map mixes a uniform
term, a Gaussian centre-bias term and a normalized local difference between
reference and distorted image, so sampling favours the centre and the
regions where the pair actually differs. Both images are cut at the same
positions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from modiqa import kernels
from modiqa.autodiff import DimensionError
from modiqa.encoder import ConfigError

SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class SamplerConfig:
    alpha: float = 0.2
    beta: float = 0.3
    gamma: float = 0.5
    sigma_center: float = 0.25
    diff_metric: str = "mse"
    patch_size: int = 16

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or self.alpha + self.beta + self.gamma <= 0:
            raise ConfigError(f"mixture weights must be nonnegative with a positive sum: {self}")
        if self.sigma_center <= 0:
            raise ConfigError("sigma_center must be positive")
        if self.diff_metric not in ("mse", "ssim_local"):
            raise ConfigError(f"unknown diff_metric {self.diff_metric!r}")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ProbabilityMap:
    """Distribution over top-left patch positions of an ``image_size`` image."""

    grid: np.ndarray
    patch_size: int
    image_size: tuple

    def __post_init__(self):
        g = self.grid
        if np.any(g < 0) or abs(g.sum() - 1.0) > 1e-9:
            raise ValueError("probability map must be nonnegative and sum to 1")


@dataclass
class PatchSequence:
    patches: np.ndarray  # (N, p, p, 3)
    uv: np.ndarray  # (N, 2), normalized (row, col) patch centres
    source_size: tuple
    positions: np.ndarray = None  # (N, 2) integer top-left corners

    def __len__(self):
        return self.patches.shape[0]


def derive_rng(seed, *keys):
    """Independent generator for ``(seed, *keys)``, e.g. (master seed, epoch, image)."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def _check_fit(h, w, p):
    if p > min(h, w) or p < 1:
        raise ConfigError(f"patch size {p} does not fit a {h}x{w} image")


def valid_grid_shape(h, w, p):
    _check_fit(h, w, p)
    return h - p + 1, w - p + 1


def compute_difference_map(ref, dist, p, metric="mse"):
    """Local difference at every valid patch position.

    ``mse`` is the mean squared error over the ``p x p x 3`` window; ``ssim_local``
    is ``1 - SSIM`` with uniform window statistics, averaged over channels.
    """
    ref = np.asarray(ref, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    if ref.shape != dist.shape:
        raise DimensionError(f"image shapes differ: {ref.shape} vs {dist.shape}")
    h, w = ref.shape[:2]
    _check_fit(h, w, p)
    if metric == "mse":
        sq = ((ref - dist) ** 2).mean(axis=2)
        return kernels.box_mean(sq, p)
    if metric != "ssim_local":
        raise ConfigError(f"unknown difference metric {metric!r}")
    span = float(ref.max() - ref.min()) or 1.0
    c1, c2 = (SSIM_K1 * span) ** 2, (SSIM_K2 * span) ** 2
    out = np.zeros((h - p + 1, w - p + 1))
    for c in range(ref.shape[2]):
        x, y = ref[..., c], dist[..., c]
        mx, my = kernels.box_mean(x, p), kernels.box_mean(y, p)
        vx = kernels.box_mean(x * x, p) - mx * mx
        vy = kernels.box_mean(y * y, p) - my * my
        cxy = kernels.box_mean(x * y, p) - mx * my
        ssim = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        out += 1.0 - ssim
    out /= ref.shape[2]
    return np.maximum(out, 0.0)


def compute_center_bias_map(h, w, p, sigma_center):
    """Isotropic Gaussian over patch centres around the image centre, summing to 1.

    ``sigma_center`` is a fraction of ``min(h, w)``.
    """
    if sigma_center <= 0:
        raise ConfigError("sigma_center must be positive")
    hc, wc = valid_grid_shape(h, w, p)
    sigma = sigma_center * min(h, w)
    rows = np.arange(hc) + p / 2.0 - h / 2.0
    cols = np.arange(wc) + p / 2.0 - w / 2.0
    g = np.exp(-0.5 * (rows[:, None] ** 2 + cols[None, :] ** 2) / sigma**2)
    return g / g.sum()


def build_probability_map(ref, dist, config: SamplerConfig):
    """Mixture ``alpha*uniform + beta*centre + gamma*difference``, normalized.

    A difference map that is zero everywhere (identical images) drops out, so
    the result equals the map built with ``gamma=0``; if ``alpha`` and ``beta``
    are also zero the result is uniform.
    """
    ref = np.asarray(ref)
    h, w = ref.shape[:2]
    p = config.patch_size
    hc, wc = valid_grid_shape(h, w, p)
    uniform = np.full((hc, wc), 1.0 / (hc * wc))
    total = config.alpha * uniform
    if config.beta > 0:
        total = total + config.beta * compute_center_bias_map(h, w, p, config.sigma_center)
    if config.gamma > 0:
        diff = compute_difference_map(ref, dist, p, config.diff_metric)
        s = diff.sum()
        if s > 0:
            total = total + config.gamma * (diff / s)
        elif config.alpha + config.beta == 0:
            total = uniform
    total = total / total.sum()
    return ProbabilityMap(grid=total, patch_size=p, image_size=(h, w))


def sample_centers(pmap: ProbabilityMap, n, rng):
    """Draw ``n`` top-left positions i.i.d. (with replacement) from ``pmap``."""
    if n < 1:
        raise ConfigError("need at least one patch")
    flat = pmap.grid.ravel()
    cdf = np.cumsum(flat)
    cdf /= cdf[-1]
    u = rng.random(n)
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, flat.size - 1)
    # zero-mass cells share a cdf value with their predecessor and are never returned
    return np.stack(np.unravel_index(idx, pmap.grid.shape), axis=1)


def uv_of_positions(positions, p, h, w):
    pos = np.asarray(positions, dtype=np.float64)
    return np.stack([(pos[:, 0] + p / 2.0) / h, (pos[:, 1] + p / 2.0) / w], axis=1)


def extract_patches(image, positions, p):
    windows = sliding_window_view(np.asarray(image), (p, p), axis=(0, 1))  # (hc, wc, 3, p, p)
    pos = np.asarray(positions)
    return np.ascontiguousarray(np.moveaxis(windows[pos[:, 0], pos[:, 1]], 1, -1))


def sample_patches(ref, dist, pmap: ProbabilityMap, n, rng):
    """Aligned patch sequences for both images at ``n`` positions drawn from ``pmap``.

    ``rng`` is a numpy Generator or an integer seed.
    """
    ref = np.asarray(ref)
    dist = np.asarray(dist)
    if ref.shape != dist.shape:
        raise DimensionError(f"image shapes differ: {ref.shape} vs {dist.shape}")
    h, w = ref.shape[:2]
    p = pmap.patch_size
    _check_fit(h, w, p)
    if tuple(pmap.image_size) != (h, w):
        raise DimensionError(f"map built for {pmap.image_size}, images are {(h, w)}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    pos = sample_centers(pmap, n, rng)
    uv = uv_of_positions(pos, p, h, w)
    return (
        PatchSequence(extract_patches(ref, pos, p), uv, (h, w), pos),
        PatchSequence(extract_patches(dist, pos, p), uv.copy(), (h, w), pos),
    )


def tile_patches(image, p):
    """Non-overlapping raster tiling; the bottom/right remainder is dropped."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    _check_fit(h, w, p)
    rows, cols = np.meshgrid(np.arange(h // p) * p, np.arange(w // p) * p, indexing="ij")
    pos = np.stack([rows.ravel(), cols.ravel()], axis=1)
    return PatchSequence(extract_patches(image, pos, p), uv_of_positions(pos, p, h, w), (h, w), pos)


def untile_patches(seq: PatchSequence, p):
    """Reassemble a tiled sequence into the cropped image."""
    h, w = seq.source_size
    nr, nc = h // p, w // p
    return seq.patches.reshape(nr, nc, p, p, -1).transpose(0, 2, 1, 3, 4).reshape(nr * p, nc * p, -1)
