"""Procedural fixture videos whose quality is set by injected degradation."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import Manifest, ManifestItem, save_manifest, write_container
from .tokenizer import RawVideo


def _content(rng: np.random.Generator, frames: int, size: int) -> np.ndarray:
    """Smooth drifting gratings plus a moving disk, float in [0, 255]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((frames, size, size, 3))
    waves = []
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.5, size=2) * rng.choice([-1, 1], size=2)
        waves.append((fx, fy, rng.uniform(0, 2 * np.pi), rng.uniform(-0.3, 0.3), rng.uniform(0.3, 1.0, size=3)))
    cx, cy = rng.uniform(0.2, 0.8, size=2)
    vx, vy = rng.uniform(-0.02, 0.02, size=2)
    radius = rng.uniform(0.1, 0.25)
    disk_color = rng.uniform(-1, 1, size=3)
    for t in range(frames):
        img = np.zeros((size, size, 3))
        for fx, fy, phase, speed, color in waves:
            img += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase + speed * t)[..., None] * color
        d2 = (xx - (cx + vx * t)) ** 2 + (yy - (cy + vy * t)) ** 2
        img += (d2 < radius ** 2)[..., None] * disk_color
        out[t] = img
    out = (out - out.min()) / (out.max() - out.min() + 1e-12)
    return 40.0 + 175.0 * out


def _box_blur(frames: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return frames
    k = 2 * radius + 1
    pad = np.pad(frames, ((0, 0), (radius, radius), (radius, radius), (0, 0)), mode="edge")
    c = np.cumsum(np.cumsum(pad, axis=1), axis=2)
    c = np.pad(c, ((0, 0), (1, 0), (1, 0), (0, 0)))
    h, w = frames.shape[1:3]
    s = c[:, k:k + h, k:k + w] - c[:, :h, k:k + w] - c[:, k:k + h, :w] + c[:, :h, :w]
    return s / (k * k)


def degrade(frames: np.ndarray, level: float, rng: np.random.Generator, degradation: str = "noise",
            max_noise: float = 60.0, max_blur: int = 3) -> np.ndarray:
    """Apply blur and/or Gaussian noise whose strength grows with ``level`` in [0, 1]."""
    out = frames
    if degradation in ("blur", "both"):
        out = _box_blur(out, int(round(max_blur * level)))
    if degradation in ("noise", "both"):
        out = out + rng.normal(0.0, max_noise * level, size=out.shape)
    elif degradation != "blur":
        raise ValueError(f"unknown degradation {degradation!r}")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def make_synthetic_dataset(out_dir: str | Path, count: int = 8, frames: int = 16, size: int = 80,
                           seed: int = 0, dataset: str = "synth",
                           mos_range: tuple[float, float] = (1.0, 5.0), degradation: str = "noise",
                           max_noise: float = 60.0, max_blur: int = 3,
                           manifest_name: str = "manifest.json") -> Manifest:
    """Write ``count`` container files plus a manifest; returns the manifest.

    Degradation levels are stratified over [0, 1] so they are distinct, and
    the assigned MOS falls linearly from the top of ``mos_range`` (clean)
    to the bottom (most degraded).
    """
    if count < 1 or frames < 1 or size < 1:
        raise ValueError("count, frames and size must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    levels = (rng.permutation(count) + rng.uniform(0.05, 0.95, size=count)) / count
    lo, hi = mos_range
    items = []
    for i, level in enumerate(levels):
        clean = _content(rng, frames, size)
        video = RawVideo(degrade(clean, level, rng, degradation, max_noise, max_blur))
        name = f"{dataset}_{i:03d}.svqv"
        write_container(video, out_dir / name)
        mos = round(hi - (hi - lo) * float(level), 6)
        items.append(ManifestItem(name, mos, dataset))
    manifest = Manifest({dataset: (float(lo), float(hi))}, items, out_dir)
    if manifest_name:
        save_manifest(manifest, out_dir / manifest_name)
    return manifest
