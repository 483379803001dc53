"""Procedural smooth images used as toy-prior templates and test inputs."""

from __future__ import annotations

from importlib import resources

import numpy as np

from .core import SplitMix64, load_image, quantize

TEMPLATE_SIZES = (256, 512)
TEMPLATES_PER_SIZE = 8
TEMPLATE_SEED = 20240601


def smooth_field(seed: int, height: int, width: int | None = None, waves: int = 6) -> np.ndarray:
    """Low-frequency random RGB field in [0.05, 0.95], quantized to 8 bits.

    A shared brightness component (sum of random plane waves with at most
    three cycles per image) plus weaker per-channel tints.
    """
    width = height if width is None else width
    rng = SplitMix64(seed)
    yy, xx = np.meshgrid(
        (np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij"
    )

    def field(n: int) -> np.ndarray:
        freq = np.floor(rng.uniform(2 * n) * 7).reshape(n, 2) - 3
        phase = 2 * np.pi * rng.uniform(n)
        amp = 0.5 + rng.uniform(n)
        out = np.zeros((height, width))
        for (fy, fx), p, a in zip(freq, phase, amp):
            out += a * np.cos(2 * np.pi * (fy * yy + fx * xx) + p)
        span = out.max() - out.min()
        return (out - out.min()) / span if span > 0 else np.full_like(out, 0.5)

    u = rng.uniform(2)
    lo, hi = 0.15 + 0.2 * u[0], 0.65 + 0.2 * u[1]
    base = lo + (hi - lo) * field(waves)
    img = np.empty((height, width, 3))
    for ch in range(3):
        img[:, :, ch] = base + 0.2 * (field(3) - 0.5)
    return quantize(np.clip(img, 0.05, 0.95))


def generate_templates(size: int, count: int = TEMPLATES_PER_SIZE, seed: int = TEMPLATE_SEED) -> list[np.ndarray]:
    return [smooth_field(seed + 1000 * size + j, size) for j in range(count)]


def load_templates(size: int) -> np.ndarray:
    """Checked-in template PNGs for ``size``; regenerated when absent."""
    folder = resources.files("luminark") / "data" / f"templates_{size}"
    files = sorted(p for p in folder.iterdir() if p.name.endswith(".png")) if folder.is_dir() else []
    if not files:
        return np.stack(generate_templates(size))
    return np.stack([load_image(p) for p in files])
