"""Slow, obviously-correct reference implementations shared by the tests."""

import colorsys
import itertools

import numpy as np

from toposeg.morph import hsl_to_rgb, rgb_to_hsl


def window_extreme(f, size, fn):
    """Nested-loop flat-window min/max with edge replication."""
    r = size // 2
    h, w = f.shape
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            vals = [
                f[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]
                for dy in range(-r, r + 1)
                for dx in range(-r, r + 1)
            ]
            out[y, x] = fn(vals)
    return out


def box_count(mask, s):
    """Occupied s-by-s boxes of a 2-D binary mask, by explicit looping."""
    h, w = mask.shape
    n = 0
    for y in range(0, h, s):
        for x in range(0, w, s):
            if mask[y:y + s, x:x + s].any():
                n += 1
    return n


def assignment_brute_force(cost):
    n = cost.shape[0]
    best, best_perm = None, None
    for perm in itertools.permutations(range(n)):
        c = sum(cost[i, perm[i]] for i in range(n))
        if best is None or c < best:
            best, best_perm = c, perm
    return best, best_perm


def colorsys_hsl(rgb):
    """Reference (H in degrees, S, L) via the standard library."""
    h, l, s = colorsys.rgb_to_hls(*(np.asarray(rgb, dtype=np.float64) / 255.0))
    return 360.0 * h, s, l


def lattice_colors(step_count=17):
    levels = np.rint(np.linspace(0, 255, step_count)).astype(np.uint8)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), axis=-1)
    return grid.reshape(-1, 1, 3)


def color_card(size=64):
    """Deterministic colour test card: hue ramps, a gray wedge and a few hard-edged patches."""
    yy, xx = np.mgrid[0:size, 0:size]
    hue = 360.0 * xx / size
    sat = np.clip(0.2 + 0.8 * yy / size, 0.0, 1.0)
    light = 0.3 + 0.4 * ((xx // 8 + yy // 8) % 2)
    hsl = np.stack([hue, sat, light], axis=-1)
    img = hsl_to_rgb(hsl)
    img[:8, :] = np.linspace(0, 255, size).astype(np.uint8)[None, :, None]
    img[40:48, 40:48] = (250, 250, 250)
    img[20:22, 10:30] = (10, 10, 10)
    return img


def hue_sat_recoverable(original, augmented):
    """Max per-channel count error when the original H,S are re-rendered with the augmented L.

    A lightness-only edit keeps this at most 1 (one rounding step).
    """
    hsl_in = rgb_to_hsl(original)
    hsl_out = rgb_to_hsl(augmented)
    rerendered = hsl_to_rgb(np.concatenate([hsl_in[..., :2], hsl_out[..., 2:]], axis=-1))
    return int(np.abs(rerendered.astype(int) - augmented.astype(int)).max())
