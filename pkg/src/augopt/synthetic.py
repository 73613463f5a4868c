"""Synthetic images for tests and the verification suites."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def smooth_random_image(rng: np.random.Generator, size: int = 16, sigma: float = 1.5) -> np.ndarray:
    img = gaussian_filter(rng.random((size, size)), sigma=sigma, mode="reflect")
    lo, hi = img.min(), img.max()
    return 0.1 + 0.8 * (img - lo) / (hi - lo)


def blob_mask(size: int, center: tuple[float, float], radius: float, softness: float = 1.0) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    d = np.hypot(xs - center[0], ys - center[1])
    return np.clip(0.5 - (d - radius) / (2.0 * softness), 0.0, 1.0)


def abdomen_like(rng: np.random.Generator, size: int = 64, variability: float = 1.0) -> np.ndarray:
    """Dark constant background, a textured body ellipse and a few brighter 'organs'.

    The same structures recur in every image; ``variability`` scales how much
    their placement, brightness and texture differ between images.
    """
    v = variability
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    img = np.zeros((size, size))
    rx, ry = 0.42 * (1 + rng.normal(0, 0.04 * v)), 0.36 * (1 + rng.normal(0, 0.04 * v))
    body = ((xs - 0.5) / rx) ** 2 + ((ys - 0.5) / ry) ** 2 < 1.0
    noise = 0.06 * np.exp(rng.normal(0, 0.3 * v))
    texture = gaussian_filter(rng.standard_normal((size, size)), 0.7 + abs(rng.normal(0, 0.3 * v)))
    texture /= texture.std()
    img[body] = 0.35 + rng.normal(0, 0.04 * v) + noise * texture[body]
    # (center, radius, brightness, stripe orientation, stripe period in pixels)
    organs = [((0.32, 0.45), 0.14, 0.75, 0.3, 6.0), ((0.68, 0.42), 0.09, 0.6, 1.6, 4.0),
              ((0.55, 0.66), 0.07, 0.9, 2.6, 5.0)]
    px, py = xs * (size - 1), ys * (size - 1)
    for (cx, cy), r, level, theta, period in organs:
        cx += rng.normal(0, 0.03 * v)
        cy += rng.normal(0, 0.03 * v)
        r *= 1.0 + rng.normal(0, 0.08 * v)
        level += rng.normal(0, 0.05 * v)
        theta += rng.normal(0, 0.25 * v)
        phase = rng.uniform(0, 2 * np.pi)
        stripes = np.sin(2 * np.pi * (px * np.cos(theta) + py * np.sin(theta)) / period + phase)
        inside = ((xs - cx) ** 2 + (ys - cy) ** 2 < r * r) & body
        img[inside] = level + 0.08 * stripes[inside] + 0.5 * noise * texture[inside]
    return np.clip(img, 0.0, 1.0)


def abdomen_corpus(n: int, size: int = 64, seed: int = 0, variability: float = 1.0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [abdomen_like(rng, size, variability) for _ in range(n)]


def grating(rng: np.random.Generator, size: int = 64, theta: float = 0.3, period: float = 8.0,
            noise: float = 0.05) -> np.ndarray:
    """Sinusoidal grating with random phase over faint smooth noise."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    stripes = np.sin(2 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / period + rng.uniform(0, 2 * np.pi))
    texture = gaussian_filter(rng.standard_normal((size, size)), 1.0)
    texture /= texture.std()
    return np.clip(0.5 + 0.25 * stripes + noise * texture, 0.0, 1.0)


def grating_corpus(n: int, size: int = 64, seed: int = 0,
                   orientations: tuple[float, ...] = (0.3, 0.3 + np.pi / 2), noise: float = 0.05) -> list[np.ndarray]:
    """Gratings cycling through ``orientations``.

    Balanced orientation classes make every image equally typical of the
    corpus, so intra-class similarity varies little between anatomies.
    """
    rng = np.random.default_rng(seed)
    return [grating(rng, size, orientations[i % len(orientations)], noise=noise) for i in range(n)]


def two_region(size: int = 8, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    img = np.full((size, size), low)
    img[:, size // 2:] = high
    return img
