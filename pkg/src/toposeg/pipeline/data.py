"""Synthetic layered scenes with ground-truth depth and photometric ambiguity.

Each scene is a 64x64 canvas holding a background plane plus 2-4 overlapping
primitives. The primitive type decides the class and a class-specific base
colour (with jitter). Shadow bands and glare spots are then painted into the
lightness channel only, after labels and depth are fixed, so they cross class
boundaries without changing the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import formats
from ..morph import hsl_to_rgb, rgb_to_hsl

SIZE = 64
N_CLASSES = 4
DEPTH_LEVELS = 65535

# background, rectangle, ellipse, bar
BASE_COLORS = np.array(
    [
        [112, 138, 96],
        [196, 84, 64],
        [72, 108, 196],
        [214, 184, 76],
    ],
    dtype=np.float64,
)


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (1, H, W) float64 in [0, 1]
    labels: np.ndarray  # (H, W) int64


def _jittered_color(rng, cls: int) -> np.ndarray:
    base = BASE_COLORS[cls] + rng.normal(0.0, 14.0, size=3)
    return np.clip(base * rng.uniform(0.8, 1.15), 0, 255)


def _primitive_mask(rng, cls: int, yy, xx) -> np.ndarray:
    if cls == 1:
        h, w = rng.integers(14, 31, size=2)
        y0, x0 = rng.integers(0, SIZE - h + 1), rng.integers(0, SIZE - w + 1)
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    if cls == 2:
        ry, rx = rng.uniform(7, 15, size=2)
        cy, cx = rng.uniform(8, SIZE - 8, size=2)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    thick = int(rng.integers(5, 9))
    length = int(rng.integers(30, 61))
    if rng.random() < 0.5:
        y0, x0 = rng.integers(0, SIZE - thick + 1), rng.integers(0, SIZE - length + 1)
        return (yy >= y0) & (yy < y0 + thick) & (xx >= x0) & (xx < x0 + length)
    y0, x0 = rng.integers(0, SIZE - length + 1), rng.integers(0, SIZE - thick + 1)
    return (yy >= y0) & (yy < y0 + length) & (xx >= x0) & (xx < x0 + thick)


def _shadow_and_glare(rng, light: np.ndarray, yy, xx) -> np.ndarray:
    light = light.copy()
    for _ in range(int(rng.integers(1, 3))):
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(-20, 20)
        width = rng.uniform(5, 12)
        dist = (xx - SIZE / 2) * np.cos(theta) + (yy - SIZE / 2) * np.sin(theta) - offset
        band = np.abs(dist) <= width / 2
        light[band] *= rng.uniform(0.45, 0.7)
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = rng.uniform(0, SIZE, size=2)
        radius = rng.uniform(4, 9)
        fall = np.clip(1.0 - np.hypot(yy - cy, xx - cx) / radius, 0.0, 1.0)
        light += (1.0 - light) * 0.65 * fall
    return np.clip(light, 0.0, 1.0)


def make_scene(rng: np.random.Generator) -> SyntheticScene:
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    labels = np.zeros((SIZE, SIZE), dtype=np.int64)
    rgb = np.broadcast_to(_jittered_color(rng, 0), (SIZE, SIZE, 3)).copy()
    near, far = rng.uniform(0.3, 0.4), rng.uniform(0.05, 0.15)
    depth = far + (near - far) * yy / (SIZE - 1)

    n_shapes = int(rng.integers(2, 5))
    for k in range(n_shapes):
        cls = int(rng.integers(1, N_CLASSES))
        mask = _primitive_mask(rng, cls, yy, xx)
        if not mask.any():
            continue
        labels[mask] = cls
        rgb[mask] = _jittered_color(rng, cls)
        base = 0.45 + 0.5 * (k + 1) / (n_shapes + 1)
        gy, gx = rng.uniform(-0.03, 0.03, size=2)
        ramp = gy * (yy - yy[mask].mean()) / SIZE + gx * (xx - xx[mask].mean()) / SIZE
        depth[mask] = base + ramp[mask]

    rgb = np.clip(rgb + rng.normal(0.0, 4.0, size=rgb.shape), 0, 255)
    hsl = rgb_to_hsl(np.rint(rgb).astype(np.uint8))
    hsl[..., 2] = _shadow_and_glare(rng, hsl[..., 2], yy, xx)
    image = hsl_to_rgb(hsl)
    depth = np.rint(np.clip(depth, 0.0, 1.0) * DEPTH_LEVELS) / DEPTH_LEVELS
    return SyntheticScene(image=image, depth=depth[None], labels=labels)


def generate_corpus(n: int, seed: int) -> list[SyntheticScene]:
    """``n`` scenes; scene ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    return [make_scene(np.random.default_rng([seed, i])) for i in range(n)]


def save_corpus(scenes: list[SyntheticScene], directory) -> None:
    """Write ``scene_XXXX.png``, ``scene_XXXX_depth.pgm`` (16-bit) and ``scene_XXXX_labels.pgm``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scenes):
        stem = d / f"scene_{i:04d}"
        formats.write_rgb(f"{stem}.png", sc.image)
        formats.write_gray(f"{stem}_depth.pgm", np.rint(sc.depth[0] * DEPTH_LEVELS).astype(np.int64), bits=16)
        formats.write_gray(f"{stem}_labels.pgm", sc.labels, bits=8)


def load_corpus(directory) -> list[SyntheticScene]:
    d = Path(directory)
    images = sorted(p for p in d.glob("scene_*.png"))
    if not images:
        raise FileNotFoundError(f"no scenes found in {d}")
    out = []
    for img_path in images:
        stem = img_path.with_suffix("")
        depth = formats.read_gray(f"{stem}_depth.pgm").astype(np.float64) / DEPTH_LEVELS
        out.append(
            SyntheticScene(
                image=formats.read_rgb(img_path),
                depth=depth[None],
                labels=formats.read_gray(f"{stem}_labels.pgm"),
            )
        )
    return out


def stack_images(scenes) -> np.ndarray:
    """Batch of images as a float [B, 3, H, W] array centred on zero."""
    return np.stack([s.image for s in scenes]).transpose(0, 3, 1, 2).astype(np.float64) / 255.0 - 0.5
