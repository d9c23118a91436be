"""Desk-scale data: synthetic oriented textures and a small-image directory loader."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".gif")


@dataclass(frozen=True)
class Batch:
    """One uniform-shape batch. ``labels`` is None for pretraining."""
    pixels: np.ndarray
    labels: np.ndarray | None
    mask_seeds: np.ndarray
    index: np.ndarray

    def __post_init__(self):
        self.pixels.setflags(write=False)


def synthetic_textures(n: int, size: tuple[int, int] = (64, 32), num_classes: int = 4,
                       seed: int = 0, frames: int | None = None,
                       noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Oriented sinusoidal gratings, one orientation per class.

    Frequency, phase, and colour pair are random per sample. With ``frames``
    the grating drifts across frames, giving ``[n, T, H, W, 3]`` clips.
    Values are float32 in [0, 1].
    """
    rng = np.random.default_rng(seed)
    h, w = size
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = np.arange(frames or 1, dtype=np.float64)
    out = np.empty((n, frames or 1, h, w, 3), dtype=np.float32)
    for i, k in enumerate(labels):
        angle = np.pi * k / num_classes + rng.normal(0.0, 0.05)
        freq = rng.uniform(0.15, 0.45)
        phase = rng.uniform(0.0, 2 * np.pi)
        drift = rng.uniform(0.2, 0.6)
        proj = np.cos(angle) * xx + np.sin(angle) * yy
        wave = 0.5 + 0.5 * np.sin(freq * proj[None] + phase + drift * t[:, None, None])
        lo, hi = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
        img = lo + (hi - lo) * wave[..., None]
        img += rng.normal(0.0, noise, img.shape)
        out[i] = np.clip(img, 0.0, 1.0)
    return (out if frames else out[:, 0]), labels.astype(np.int64)


def load_image_dir(path: str | Path, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Images under ``path`` resized to ``size`` (H, W).

    Sub-directories become classes in sorted order; loose files get class 0.
    """
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    entries: list[tuple[Path, int]] = []
    if classes:
        for k, name in enumerate(classes):
            entries += [(f, k) for f in sorted((root / name).iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES]
    else:
        classes = [root.name]
        entries = [(f, 0) for f in sorted(root.iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES]
    if not entries:
        raise FileNotFoundError(f"no images found under {root}")
    h, w = size
    pixels = np.empty((len(entries), h, w, 3), dtype=np.float32)
    for i, (f, _) in enumerate(entries):
        with Image.open(f) as im:
            pixels[i] = np.asarray(im.convert("RGB").resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0
    labels = np.array([k for _, k in entries], dtype=np.int64)
    return pixels, labels, classes


def mask_seed(base: int, epoch: int, sample: int) -> int:
    return int(np.random.SeedSequence([base, epoch, sample]).generate_state(1)[0])


def iterate_batches(pixels: np.ndarray, labels: np.ndarray | None, batch_size: int, seed: int,
                    epoch: int, shuffle: bool = True, fixed_masks: bool = False) -> Iterator[Batch]:
    """Plain pass over the data. Mask seeds depend on (seed, epoch, sample index)
    or only on (seed, sample index) when ``fixed_masks``."""
    n = len(pixels)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        seeds = np.array([mask_seed(seed, 0 if fixed_masks else epoch, int(i)) for i in idx], dtype=np.uint64)
        yield Batch(
            np.ascontiguousarray(pixels[idx]),
            None if labels is None else labels[idx],
            seeds,
            idx,
        )
