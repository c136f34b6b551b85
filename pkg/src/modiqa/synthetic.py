"""Procedural image-quality datasets for smoke tests and desk-scale training."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from modiqa.data import ImageRecord, load_manifest, write_manifest

BLUR_SIGMAS = (0.5, 1.0, 1.5, 2.0, 3.0)
NOISE_STDS = (4.0, 8.0, 16.0, 24.0, 32.0)


def procedural_image(rng, size=64):
    """Smooth colour gradients, sinusoidal texture and a few hard-edged shapes."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    img = np.zeros((h, w, 3))
    for c in range(3):
        a, b, off = rng.uniform(-1, 1, 3)
        img[..., c] = 0.5 + 0.25 * (a * xx + b * yy) + 0.1 * off
    for _ in range(3):
        fx, fy = rng.uniform(2, 12, 2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.15)
        wave = amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img += wave[..., None] * rng.uniform(0.3, 1.0, 3)
    for _ in range(rng.integers(3, 7)):
        colour = rng.uniform(0, 1, 3)
        cy, cx = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.05, 0.2)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img[mask] = colour
    checker = ((np.floor(xx * rng.integers(4, 12)) + np.floor(yy * rng.integers(4, 12))) % 2) - 0.5
    img += 0.06 * checker[..., None]
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def blur(img, sigma):
    out = np.stack([gaussian_filter(img[..., c].astype(np.float64), sigma, mode="reflect") for c in range(3)], axis=-1)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def add_noise(img, std, rng):
    out = img.astype(np.float64) + rng.normal(0.0, std, img.shape)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def make_dataset(root, n_refs=20, distortion="blur", levels=None, size=64, seed=0, prefix="ref"):
    """Write reference/distorted PNGs and a manifest under ``root``; return the manifest.

    Target scores fall linearly with distortion level (higher is better).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    if levels is None:
        levels = BLUR_SIGMAS if distortion == "blur" else NOISE_STDS
    records = []
    for r in range(n_refs):
        ref = procedural_image(rng, size)
        ref_name = f"{prefix}{r:03d}.png"
        Image.fromarray(ref).save(root / ref_name)
        for k, level in enumerate(levels):
            if distortion == "blur":
                dist = blur(ref, level)
            elif distortion == "noise":
                dist = add_noise(ref, level, rng)
            else:
                raise ValueError(f"unknown distortion {distortion!r}")
            name = f"{prefix}{r:03d}_{distortion}{k}.png"
            Image.fromarray(dist).save(root / name)
            score = 1.0 - k / max(len(levels) - 1, 1)
            records.append(ImageRecord(Path(ref_name), Path(name), score, f"{prefix}{r:03d}"))
    write_manifest(root / "manifest.csv", records)
    return load_manifest(root / "manifest.csv", name=f"synthetic-{distortion}")
