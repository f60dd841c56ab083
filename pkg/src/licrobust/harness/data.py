"""Seeded synthetic texture images (smooth value noise plus hard edges)."""
from __future__ import annotations

import numpy as np
import torch


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size, endpoint=False)
    i = t.astype(int)
    f = t - i
    f = f * f * (3.0 - 2.0 * f)  # smoothstep
    a = grid[i][:, i]
    b = grid[i][:, i + 1]
    c = grid[i + 1][:, i]
    d = grid[i + 1][:, i + 1]
    fx = f[None, :]
    fy = f[:, None]
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    return top * (1 - fy) + bot * fy


def _fractal(rng, size, octaves=3, base=4):
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        out += amp * _value_noise(rng, size, base * 2**o)
        total += amp
        amp *= 0.5
    return out / total


def texture(seed: int, size: int = 64) -> np.ndarray:
    """One H x W x 3 float image in [0, 1]."""
    rng = np.random.default_rng(seed)
    lum = _fractal(rng, size)
    palette = rng.random((2, 3))
    img = palette[0] * (1 - lum[..., None]) + palette[1] * lum[..., None]
    yy, xx = np.mgrid[0:size, 0:size] / size
    for _ in range(rng.integers(2, 5)):
        kind = rng.integers(0, 3)
        color = rng.random(3)
        if kind == 0:  # half-plane edge
            ang = rng.uniform(0, np.pi)
            off = rng.uniform(-0.3, 0.3)
            mask = (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)) > off
        elif kind == 1:  # disc
            cx, cy, r = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.08, 0.3)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        else:  # stripes inside a box
            x0, y0 = rng.uniform(0, 0.6, size=2)
            w, h = rng.uniform(0.2, 0.4, size=2)
            period = rng.uniform(0.03, 0.12)
            box = (xx > x0) & (xx < x0 + w) & (yy > y0) & (yy < y0 + h)
            mask = box & (np.sin(2 * np.pi * xx / period) > 0)
        alpha = rng.uniform(0.5, 0.9)
        img[mask] = (1 - alpha) * img[mask] + alpha * color
    img += rng.normal(0.0, 0.004, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_dataset(n: int, seed: int, size: int = 64) -> torch.Tensor:
    """N x 3 x size x size float32 tensor of independent textures."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    imgs = [texture(int(s), size) for s in seeds]
    arr = np.stack(imgs).transpose(0, 3, 1, 2).astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr))
