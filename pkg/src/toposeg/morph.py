"""Grayscale morphology, RGB/HSL conversion and lightness-only topological augmentation.

Morphology uses flat square structuring elements, so erosion and dilation are
sliding-window min/max filters. Borders are handled by edge replication.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import formats
from .errors import InvalidConfig

OPERATORS = ("erode", "dilate", "open", "close", "white_tophat", "black_tophat")
SE_SIZES = (3, 5)


@dataclass(frozen=True)
class StructuringElement:
    """Flat square structuring element centred on the origin."""

    size: int = 3

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"structuring element size must be odd, got {self.size}")


def _se_size(b) -> int:
    if isinstance(b, StructuringElement):
        return b.size
    return StructuringElement(int(b)).size


# -- color ----------------------------------------------------------------------


def rgb_to_hsl(img: np.ndarray) -> np.ndarray:
    """Convert an ``(H, W, 3)`` uint8 image to float HSL channels.

    Returns an ``(H, W, 3)`` array of (hue in degrees [0, 360), saturation,
    lightness), the latter two in [0, 1]. Achromatic pixels get hue 0.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min(initial=0) < 0 or img.max(initial=0) > 255:
            raise ValueError("RGB values must lie in 0..255")
    rgb = img.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    chroma = mx - mn
    light = (mx + mn) / 2.0
    denom = 1.0 - np.abs(2.0 * light - 1.0)
    chromatic = chroma > 0
    sat = np.zeros_like(light)
    np.divide(chroma, denom, out=sat, where=chromatic)
    safe = np.where(chromatic, chroma, 1.0)
    hue = np.where(
        mx == r,
        np.mod((g - b) / safe, 6.0),
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    hue = np.where(chromatic, 60.0 * hue, 0.0)
    hue = np.where(hue >= 360.0, hue - 360.0, hue)
    return np.stack([hue, np.clip(sat, 0.0, 1.0), light], axis=-1)


def hsl_to_rgb(hsl: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsl`, rounding to the nearest 8-bit count."""
    hsl = np.asarray(hsl, dtype=np.float64)
    if hsl.ndim != 3 or hsl.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) HSL array, got shape {hsl.shape}")
    h, s, l = hsl[..., 0], hsl[..., 1], hsl[..., 2]
    if not np.isfinite(hsl).all():
        raise ValueError("HSL channels must be finite")
    if (h < 0).any() or (h >= 360).any():
        raise ValueError("hue must lie in [0, 360)")
    if (s < 0).any() or (s > 1).any() or (l < 0).any() or (l > 1).any():
        raise ValueError("saturation and lightness must lie in [0, 1]")
    chroma = (1.0 - np.abs(2.0 * l - 1.0)) * s
    hp = h / 60.0
    x = chroma * (1.0 - np.abs(np.mod(hp, 2.0) - 1.0))
    sector = np.floor(hp).astype(np.int64)
    zero = np.zeros_like(chroma)
    # (r, g, b) before adding the lightness offset, per 60-degree sector
    table = [
        (chroma, x, zero),
        (x, chroma, zero),
        (zero, chroma, x),
        (zero, x, chroma),
        (x, zero, chroma),
        (chroma, zero, x),
    ]
    rgb = np.zeros(h.shape + (3,))
    for k, (rr, gg, bb) in enumerate(table):
        sel = sector == k
        rgb[sel, 0], rgb[sel, 1], rgb[sel, 2] = rr[sel], gg[sel], bb[sel]
    rgb += (l - chroma / 2.0)[..., None]
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


# -- morphology -----------------------------------------------------------------


def erode(f: np.ndarray, b=3) -> np.ndarray:
    k = _se_size(b)
    return ndimage.grey_erosion(np.asarray(f, dtype=np.float64), size=(k, k), mode="nearest")


def dilate(f: np.ndarray, b=3) -> np.ndarray:
    k = _se_size(b)
    return ndimage.grey_dilation(np.asarray(f, dtype=np.float64), size=(k, k), mode="nearest")


def opening(f: np.ndarray, b=3) -> np.ndarray:
    return dilate(erode(f, b), b)


def closing(f: np.ndarray, b=3) -> np.ndarray:
    return erode(dilate(f, b), b)


def white_tophat(f: np.ndarray, b=3) -> np.ndarray:
    """Bright detail smaller than the structuring element: ``f - open(f)``."""
    return np.asarray(f, dtype=np.float64) - opening(f, b)


def black_tophat(f: np.ndarray, b=3) -> np.ndarray:
    """Dark detail smaller than the structuring element: ``close(f) - f``."""
    return closing(f, b) - np.asarray(f, dtype=np.float64)


def morphological_gradient(f: np.ndarray, b=3) -> np.ndarray:
    return dilate(f, b) - erode(f, b)


_APPLY = {
    "erode": erode,
    "dilate": dilate,
    "open": opening,
    "close": closing,
    "white_tophat": white_tophat,
    "black_tophat": black_tophat,
}


# -- augmentation -----------------------------------------------------------------


@dataclass(frozen=True)
class AugConfig:
    """Sampling weights for the operator toolbox and structuring-element sizes."""

    op_weights: tuple[float, ...] = (1.0,) * len(OPERATORS)
    p_apply: float = 0.5
    se_weights: tuple[float, ...] = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "op_weights", tuple(float(w) for w in self.op_weights))
        object.__setattr__(self, "se_weights", tuple(float(w) for w in self.se_weights))
        if len(self.op_weights) != len(OPERATORS):
            raise InvalidConfig(f"op_weights needs {len(OPERATORS)} entries, got {len(self.op_weights)}")
        if len(self.se_weights) != len(SE_SIZES):
            raise InvalidConfig(f"se_weights needs {len(SE_SIZES)} entries, got {len(self.se_weights)}")
        for name, ws in (("op_weights", self.op_weights), ("se_weights", self.se_weights)):
            if any(not np.isfinite(w) or w < 0 for w in ws):
                raise InvalidConfig(f"{name} must be finite and non-negative")
            if not any(w > 0 for w in ws):
                raise InvalidConfig(f"{name} needs at least one positive entry")
        if not 0.0 <= self.p_apply <= 1.0:
            raise InvalidConfig(f"p_apply must lie in [0, 1], got {self.p_apply}")

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "AugConfig":
        known = {"op_weights", "p_apply", "se_weights", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfig(f"unknown augmentation keys: {sorted(unknown)}")
        kw: dict = {}
        if "op_weights" in raw:
            kw["op_weights"] = formats.config_floats(raw["op_weights"], "op_weights")
        if "se_weights" in raw:
            kw["se_weights"] = formats.config_floats(raw["se_weights"], "se_weights")
        if "p_apply" in raw:
            kw["p_apply"] = formats.config_float(raw["p_apply"], "p_apply")
        if "seed" in raw:
            kw["seed"] = formats.config_int(raw["seed"], "seed")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "AugConfig":
        return cls.from_mapping(formats.parse_flat_config(Path(path).read_text()))

    def to_mapping(self) -> dict:
        return {
            "op_weights": self.op_weights,
            "p_apply": self.p_apply,
            "se_weights": self.se_weights,
            "seed": self.seed,
        }

    def dumps(self) -> str:
        return formats.format_flat_config(self.to_mapping())


@dataclass(frozen=True)
class AugChoice:
    """One sampled augmentation; ``op is None`` means the image passes through."""

    op: str | None = None
    se_size: int | None = None

    def as_dict(self) -> dict:
        return {"applied": self.op is not None, "operator": self.op, "se_size": self.se_size}


def sample_choice(cfg: AugConfig, rng: np.random.Generator) -> AugChoice:
    if cfg.p_apply <= 0.0 or rng.random() >= cfg.p_apply:
        return AugChoice()
    ops = np.asarray(cfg.op_weights)
    ses = np.asarray(cfg.se_weights)
    op = OPERATORS[int(rng.choice(len(OPERATORS), p=ops / ops.sum()))]
    size = SE_SIZES[int(rng.choice(len(SE_SIZES), p=ses / ses.sum()))]
    return AugChoice(op, size)


def augment_lightness(hsl: np.ndarray, choice: AugChoice) -> np.ndarray:
    """Apply ``choice`` to the L channel only; hue and saturation are passed through."""
    if choice.op is None:
        return hsl
    light = _APPLY[choice.op](hsl[..., 2], choice.se_size)
    out = hsl.copy()
    out[..., 2] = np.clip(light, 0.0, 1.0)
    return out


def apply_choice(img: np.ndarray, choice: AugChoice) -> np.ndarray:
    if choice.op is None:
        return np.array(img, dtype=np.uint8, copy=True)
    return hsl_to_rgb(augment_lightness(rgb_to_hsl(img), choice))


def topo_augment(img: np.ndarray, cfg: AugConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Randomly corrupt the lightness of ``img`` with one morphological operator.

    With probability ``1 - cfg.p_apply`` the input is returned unchanged.
    Without an explicit ``rng`` a generator seeded by ``cfg.seed`` is used,
    so the result is a pure function of ``(img, cfg)``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return apply_choice(img, sample_choice(cfg, rng))
