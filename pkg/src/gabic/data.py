"""Training data: a synthetic image generator and the random-crop batch stream."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .ppm import read_image
from .tensor import Rng

PATTERNS = ("gradient", "checkerboard", "noise", "edges")


def _colors(rng: Rng, n: int) -> np.ndarray:
    return rng.uniform(0.15, 0.85, (n, 3))


def _soften(img: np.ndarray, rng: Rng) -> np.ndarray:
    """Blur hard boundaries over a couple of pixels, like an optical system would."""
    sigma = rng.uniform(1.0, 2.5, None)
    return gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")


def synthetic_image(rng: Rng, size: int = 64, pattern: str | None = None) -> np.ndarray:
    """One uint8 (size, size, 3) image of a random pattern family."""
    if pattern is None:
        pattern = PATTERNS[int(rng.integers(0, len(PATTERNS)))]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if pattern == "gradient":
        angle = rng.uniform(0, 2 * np.pi, None)
        t = np.cos(angle) * xx + np.sin(angle) * yy
        t = (t - t.min()) / max(np.ptp(t), 1e-9)
        c0, c1 = _colors(rng, 2)
        img = c0 + t[..., None] * (c1 - c0)
    elif pattern == "checkerboard":
        period = int(rng.integers(12, 33))
        ox, oy = rng.integers(0, period, 2)
        cells = ((np.arange(size)[:, None] + oy) // period + (np.arange(size)[None, :] + ox) // period) % 2
        c0, c1 = _colors(rng, 2)
        img = _soften(np.where(cells[..., None] == 0, c0, c1), rng)
    elif pattern == "noise":
        sigma = rng.uniform(5.0, 12.0, None)
        field = gaussian_filter(rng.normal((size, size, 3)), sigma=(sigma, sigma, 0), mode="wrap")
        field = (field - field.mean()) / max(field.std(), 1e-9)
        img = 0.5 + 0.18 * field * rng.uniform(0.5, 1.0, None)
    elif pattern == "edges":
        img = np.broadcast_to(_colors(rng, 1)[0], (size, size, 3)).copy()
        for _ in range(int(rng.integers(2, 6))):
            color = _colors(rng, 1)[0]
            if rng.uniform(0, 1, None) < 0.5:
                cx, cy, r = rng.uniform(0, 1, 3)
                inside = (xx - cx) ** 2 + (yy - cy) ** 2 < (0.1 + 0.3 * r) ** 2
            else:
                angle = rng.uniform(0, 2 * np.pi, None)
                offset = rng.uniform(-0.3, 0.3, None)
                inside = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5) > offset
            img[inside] = color
        img = _soften(img, rng)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def synthetic_dataset(count: int, size: int = 64, seed: int = 0) -> list[np.ndarray]:
    rng = Rng(seed)
    return [synthetic_image(rng, size, PATTERNS[i % len(PATTERNS)]) for i in range(count)]


def validation_set(size: int = 64) -> list[np.ndarray]:
    """The fixed 16-image held-out set that drives the plateau schedule."""
    return synthetic_dataset(16, size, seed=0x5EED_0001)


def load_folder(path: str | os.PathLike) -> list[np.ndarray]:
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() == ".ppm")
    if not files:
        raise FileNotFoundError(f"no .ppm images in {path}")
    return [read_image(p) for p in files]


def random_crop(image: np.ndarray, crop: int, rng: Rng) -> np.ndarray:
    h, w = image.shape[:2]
    if h < crop or w < crop:
        image = np.pad(image, ((0, max(0, crop - h)), (0, max(0, crop - w)), (0, 0)), mode="reflect")
        h, w = image.shape[:2]
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return image[top:top + crop, left:left + crop]


def to_batch(images: Sequence[np.ndarray], dtype=np.float32) -> np.ndarray:
    return (np.stack(images).astype(np.float64) / 255.0).transpose(0, 3, 1, 2).astype(dtype)


def steps_per_epoch(num_images: int, batch: int) -> int:
    return -(-num_images // batch)


def dataset_iter(images: Sequence[np.ndarray] | str | os.PathLike, crop: int, batch: int, seed: int,
                 start_step: int = 0, dtype=np.float32) -> Iterator[np.ndarray]:
    """Endless stream of (batch, 3, crop, crop) arrays in [0, 1].

    Epoch ``e`` visits the images in the order of a permutation drawn from a
    stream keyed by ``(seed, e)``, taking a uniformly random crop of each, so
    any step can be regenerated without replaying earlier ones.
    """
    if not isinstance(images, (list, tuple)):
        images = load_folder(images)
    per_epoch = steps_per_epoch(len(images), batch)
    step = start_step
    while True:
        epoch, offset = divmod(step, per_epoch)
        rng = Rng(seed).child(epoch)
        order = rng.permutation(len(images))
        crops = [random_crop(images[i], crop, rng) for i in order]
        for b in range(offset, per_epoch):
            chosen = crops[b * batch:(b + 1) * batch]
            if len(chosen) < batch:
                chosen = chosen + crops[: batch - len(chosen)]
            yield to_batch(chosen, dtype)
            step += 1
