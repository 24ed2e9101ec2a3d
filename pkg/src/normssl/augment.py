"""Reduced view-augmentation policy: random resized crop, flip, brightness/contrast."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale: tuple[float, float] = (0.4, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.3
    contrast: float = 0.3


def crop_resize(img: np.ndarray, top: int, left: int, h: int, w: int, size: int) -> np.ndarray:
    """Bilinear resample of ``img[top:top+h, left:left+w]`` to ``size x size``
    (pixel-center aligned)."""
    ys = top + (np.arange(size) + 0.5) * (h / size) - 0.5
    xs = left + (np.arange(size) + 0.5) * (w / size) - 0.5
    ys = np.clip(ys, 0, img.shape[0] - 1)
    xs = np.clip(xs, 0, img.shape[1] - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, img.shape[0] - 1)
    x1 = np.minimum(x0 + 1, img.shape[1] - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top_row = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot_row = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top_row * (1 - wy) + bot_row * wy


def _sample_crop(rng: np.random.Generator, side: int, policy: AugmentationPolicy) -> tuple[int, int, int, int]:
    area = side * side
    for _ in range(10):
        target = area * rng.uniform(*policy.crop_scale)
        ratio = np.exp(rng.uniform(np.log(policy.crop_ratio[0]), np.log(policy.crop_ratio[1])))
        w = int(round(np.sqrt(target * ratio)))
        h = int(round(np.sqrt(target / ratio)))
        if 0 < w <= side and 0 < h <= side:
            top = int(rng.integers(0, side - h + 1))
            left = int(rng.integers(0, side - w + 1))
            return top, left, h, w
    return 0, 0, side, side


def augment_batch(images: np.ndarray, rng: np.random.Generator, policy: AugmentationPolicy) -> np.ndarray:
    """One independent draw of the policy per image; ``images`` in [0, 1]."""
    n, side, _, _ = images.shape
    out = np.empty_like(images)
    for i in range(n):
        top, left, h, w = _sample_crop(rng, side, policy)
        img = crop_resize(images[i], top, left, h, w, side)
        if rng.uniform() < policy.flip_prob:
            img = img[:, ::-1]
        b = rng.uniform(-policy.brightness, policy.brightness)
        c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
        m = img.mean()
        img = (img - m) * c + m + b
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def two_views(images: np.ndarray, rng: np.random.Generator, policy: AugmentationPolicy) -> tuple[np.ndarray, np.ndarray]:
    return augment_batch(images, rng, policy), augment_batch(images, rng, policy)
