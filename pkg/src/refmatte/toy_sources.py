"""Procedural source clips for desk-scale runs.

Writes a background directory and a foreground directory in the layout
consumed by :func:`refmatte.synth.load_sources`::

    backgrounds/<clip>/000000.png ...
    foregrounds/<clip>/fg/000000.png ...
    foregrounds/<clip>/matte/000000.png ...
    foregrounds/<clip>/caption.txt

Foregrounds are flat-shaded colored shapes with soft-edged mattes; each clip
carries a caption naming its color, shape and motion.
"""
from __future__ import annotations

from itertools import product
from pathlib import Path

import numpy as np

from .io import write_frames

COLORS = {
    "red": (0.95, 0.15, 0.1),
    "green": (0.15, 0.9, 0.2),
    "blue": (0.15, 0.3, 1.0),
    "yellow": (0.98, 0.92, 0.1),
    "magenta": (0.95, 0.2, 0.9),
    "cyan": (0.1, 0.95, 0.95),
}
SHAPES = ("circle", "square", "triangle")
MOTIONS = {
    "drifting left": (0.0, -1.0),
    "drifting right": (0.0, 1.0),
    "moving up": (-1.0, 0.0),
    "moving down": (1.0, 0.0),
    "bobbing in place": (0.0, 0.0),
}


def _shape_sdf(shape: str, yy, xx, cy, cx, r):
    """Approximate signed distance (negative inside) in pixels."""
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return np.hypot(dy, dx) - r
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) - 0.85 * r
    # Upward triangle as the intersection of three half-planes.
    s3 = np.sqrt(3.0) / 2.0
    d1 = dy - 0.5 * r
    d2 = -s3 * dx - 0.5 * dy - 0.5 * r
    d3 = s3 * dx - 0.5 * dy - 0.5 * r
    return np.maximum(np.maximum(d1, d2), d3) * 1.2


def foreground_clip(color, shape, motion, n_frames, size, rng, edge=3.0):
    """Moving shape clip; ``edge`` is the width in pixels of the matte's linear ramp."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = size * rng.uniform(0.3, 0.38)
    vy, vx = MOTIONS[motion]
    speed = size * 0.15 / max(n_frames - 1, 1)
    rgb = np.asarray(COLORS[color])
    fg = np.empty((n_frames, size, size, 3))
    matte = np.empty((n_frames, size, size, 1))
    for t in range(n_frames):
        c = (t - (n_frames - 1) / 2) * speed
        bob = 0.05 * size * np.sin(2 * np.pi * t / max(n_frames, 2)) if vy == vx == 0 else 0.0
        cy = size / 2 + vy * c + bob
        cx = size / 2 + vx * c
        d = _shape_sdf(shape, yy, xx, cy, cx, r)
        matte[t, ..., 0] = np.clip(0.5 - d / edge, 0.0, 1.0)
        shade = 0.85 + 0.15 * (1.0 - (yy - cy + r) / (2 * r + 1e-9)).clip(0, 1)
        fg[t] = rgb[None, None, :] * shade[..., None]
    fg *= matte > 0
    return np.clip(fg, 0, 1), matte


def background_clip(n_frames, height, width, rng):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(0.1, 0.45, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=(2, 3))
    fy, fx = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / np.array([height, width])
    phase = rng.uniform(0, 2 * np.pi, size=3)
    drift = rng.uniform(-0.3, 0.3)
    out = np.empty((n_frames, height, width, 3))
    for t in range(n_frames):
        wave = np.sin(fy * yy[..., None] + fx * xx[..., None] + phase + drift * t)
        out[t] = (
            base
            + tilt[0] * (yy[..., None] / height - 0.5)
            + tilt[1] * (xx[..., None] / width - 0.5)
            + 0.06 * wave
        )
    return np.clip(out, 0, 1)


def make_toy_sources(
    root: str | Path,
    n_backgrounds: int = 8,
    n_frames: int = 16,
    bg_size: tuple[int, int] = (64, 64),
    fg_size: int = 40,
    seed: int = 0,
    edge: float = 3.0,
) -> tuple[Path, Path]:
    """Write toy sources under ``root``; returns (background_dir, foreground_dir).

    Every (color, shape) pair becomes one foreground clip, so captions are
    unique across the pool.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    bg_dir, fg_dir = root / "backgrounds", root / "foregrounds"
    for i in range(n_backgrounds):
        write_frames(bg_dir / f"bg_{i:03d}", background_clip(n_frames, *bg_size, rng))
    motions = list(MOTIONS)
    for i, (color, shape) in enumerate(product(COLORS, SHAPES)):
        motion = motions[int(rng.integers(len(motions)))]
        fg, matte = foreground_clip(color, shape, motion, n_frames, fg_size, rng, edge)
        clip = fg_dir / f"fg_{i:03d}"
        write_frames(clip / "fg", fg)
        write_frames(clip / "matte", matte)
        (clip / "caption.txt").write_text(f"a {color} {shape} {motion}\n", encoding="utf-8")
    return bg_dir, fg_dir
