"""Procedural clean scenes standing in for long-exposure reference frames."""

from __future__ import annotations

import numpy as np

# raw sensors see green brighter than red and blue before white balance
_CHANNEL_GAIN = np.array([0.55, 1.0, 0.65, 1.0])


def _color(rng: np.random.Generator) -> np.ndarray:
    rgb = rng.uniform(0.15, 1.0, size=3)
    return np.array([rgb[0], rgb[1], rgb[2], rgb[1]]) * _CHANNEL_GAIN


def generate_scene(size: int, rng: np.random.Generator) -> np.ndarray:
    """One packed clean frame (4, size/2, size/2) with values in [0, 1].

    A smooth two-color gradient background overlaid with random rectangles
    and disks, scaled by a per-scene exposure level.
    """
    if size % 4:
        raise ValueError(f"scene size must be divisible by 4, got {size}")
    h = w = size // 2
    yy, xx = np.mgrid[0:h, 0:w] / max(h - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.clip(0.5 + 0.5 * (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) * 1.4, 0, 1)
    c0, c1 = _color(rng), _color(rng)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(int(rng.integers(2, 7))):
        col = _color(rng)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h - 2), rng.integers(0, w - 2)
            y1 = y0 + rng.integers(2, max(3, h // 2))
            x1 = x0 + rng.integers(2, max(3, w // 2))
            img[:, y0:y1, x0:x1] = col[:, None, None]
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(h / 10, h / 3)
            mask = (yy * (h - 1) - cy) ** 2 + (xx * (w - 1) - cx) ** 2 <= rad * rad
            img[:, mask] = col[:, None]
    level = rng.uniform(0.15, 0.9)
    return np.clip(img * level, 0.0, 1.0).astype(np.float32)


def generate_corpus(count: int, size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([generate_scene(size, rng) for _ in range(count)])
