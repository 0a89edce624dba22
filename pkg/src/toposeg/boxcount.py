"""Box counting: the hard oracle, the differentiable variant and the four
topological descriptors built on it.

Maps are ``[B, C, H, W]`` tensors. A differentiable box count replaces the
occupancy indicator of each non-overlapping box by the box maximum, so on
binary maps both counts agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import UndefinedDimension
from .tensor import Tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
SOBEL_DELTA = 1e-12

DEFAULT_SCALES = (1, 2, 4, 8, 16)
CARPET_SCALES = (1, 3, 9, 27)


@dataclass(frozen=True)
class ScaleSet:
    """Strictly increasing box sizes, at least two of them."""

    sizes: tuple[int, ...] = DEFAULT_SCALES

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2:
            raise ValueError("a scale set needs at least two box sizes")
        if any(s < 1 for s in sizes):
            raise ValueError(f"box sizes must be positive, got {sizes}")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"box sizes must be strictly increasing, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    def __len__(self) -> int:
        return len(self.sizes)

    def __iter__(self):
        return iter(self.sizes)

    def check_extent(self, h: int, w: int) -> None:
        if self.sizes[-1] > min(h, w):
            raise ValueError(f"box size {self.sizes[-1]} exceeds map extent {h}x{w}")

    def box_totals(self, h: int, w: int) -> np.ndarray:
        """Number of boxes tiling an ``h`` x ``w`` map at each scale."""
        return np.array([-(-h // s) * -(-w // s) for s in self.sizes], dtype=np.float64)


def _scales(scales) -> ScaleSet:
    return scales if isinstance(scales, ScaleSet) else ScaleSet(tuple(scales))


def _as_map(m) -> Tensor:
    m = m if isinstance(m, Tensor) else Tensor(m)
    if m.ndim != 4:
        raise ValueError(f"expected a [B, C, H, W] map, got shape {m.shape}")
    return m


def hard_box_count(m, s: int) -> np.ndarray:
    """Number of ``s`` x ``s`` boxes whose maximum is positive, as a [B, C] integer array.

    This is the non-differentiable reference count.
    """
    data = _as_map(m).data
    if (data < 0).any():
        raise ValueError("hard box counting needs a non-negative map")
    with T.no_grad():
        pooled = T.block_max_pool(Tensor(data), s).data
    return (pooled > 0).sum(axis=(2, 3)).astype(np.int64)


def dbc(m, s: int) -> Tensor:
    """Differentiable box count: sum of the block maxima, shape [B, C]."""
    return T.reduce_sum(T.block_max_pool(_as_map(m), s), (2, 3))


def dbc_multiscale(m, scales) -> Tensor:
    """Stack :func:`dbc` over the scale set along a trailing axis: [B, C, k]."""
    m = _as_map(m)
    sc = _scales(scales)
    sc.check_extent(m.shape[2], m.shape[3])
    b, c = m.shape[:2]
    return T.concat([T.reshape(dbc(m, s), (b, c, 1)) for s in sc], axis=2)


def hard_box_count_multiscale(m, scales) -> np.ndarray:
    m = _as_map(m)
    sc = _scales(scales)
    sc.check_extent(m.shape[2], m.shape[3])
    return np.stack([hard_box_count(m, s) for s in sc], axis=-1)


def _check_probs(p: Tensor) -> None:
    if (p.data < 0).any() or (p.data > 1).any():
        raise ValueError("class probabilities must lie in [0, 1]")


def app_area_counts(pseudo_probs, scales) -> Tensor:
    """Per-class area counts of a soft (training) or one-hot (evaluation) class map."""
    p = _as_map(pseudo_probs)
    _check_probs(p)
    return dbc_multiscale(p, scales)


def soft_morph_gradient(m: Tensor, size: int = 3) -> Tensor:
    """Dilation minus erosion built from differentiable window maxima."""
    return T.sliding_max(m, size) - T.sliding_min(m, size)


def app_boundary_counts(pseudo_probs, scales, se_size: int = 3) -> Tensor:
    """Per-class boundary counts: box counts of each channel's morphological gradient."""
    p = _as_map(pseudo_probs)
    _check_probs(p)
    return dbc_multiscale(soft_morph_gradient(p, se_size), scales)


def _check_depth(depth: Tensor) -> None:
    if depth.shape[1] != 1:
        raise ValueError(f"depth must have one channel, got shape {depth.shape}")
    if (depth.data < 0).any() or (depth.data > 1).any():
        raise ValueError("depth must be normalised to [0, 1]")


def local_variance(depth) -> Tensor:
    """``E[x*x] - E[x]*E[x]`` over 3x3 windows, floored at zero.

    The map is edge-replicated by one pixel before filtering and cropped
    afterwards, and each map is shifted by its own minimum (variance is
    shift-invariant), so a constant map gives exactly zero everywhere.
    """
    d = _as_map(depth)
    ref = d.data.min(axis=(1, 2, 3), keepdims=True)
    d = T.pad_edge(d - Tensor(np.broadcast_to(ref, d.shape)), 1)
    mu = T.mean_filter_3x3(d)
    var = T.mean_filter_3x3(d * d) - mu * mu
    var = var[:, :, 1:-1, 1:-1]
    return T.clamp_min(var, 0.0)


def geo_roughness_counts(depth, scales) -> Tensor:
    d = _as_map(depth)
    _check_depth(d)
    return dbc_multiscale(local_variance(d), scales)


def sobel_magnitude(depth, delta: float = SOBEL_DELTA) -> Tensor:
    """``sqrt(gx^2 + gy^2 + delta)`` from 3x3 Sobel responses on an edge-replicated map."""
    d = T.pad_edge(_as_map(depth), 1)
    gx = T.conv2d_fixed(d, SOBEL_X)[:, :, 1:-1, 1:-1]
    gy = T.conv2d_fixed(d, SOBEL_Y)[:, :, 1:-1, 1:-1]
    return T.sqrt(T.shift(gx * gx + gy * gy, delta))


def geo_edge_counts(depth, scales) -> Tensor:
    d = _as_map(depth)
    _check_depth(d)
    return dbc_multiscale(sobel_magnitude(d), scales)


def occupancy_fraction(counts: Tensor, scales, h: int, w: int) -> Tensor:
    """Divide counts by the number of boxes at each scale (values in [0, 1] for maps in [0, 1])."""
    totals = _scales(scales).box_totals(h, w)
    return counts * Tensor(np.broadcast_to(1.0 / totals, counts.shape))


# -- projection heads --------------------------------------------------------------


@dataclass
class Mlp:
    """Two-layer perceptron with a rectifier between the layers."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, hidden: int, d_out: int) -> "Mlp":
        def layer(n_in, n_out):
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
            return Tensor(w, requires_grad=True), Tensor(np.zeros(n_out), requires_grad=True)

        w1, b1 = layer(d_in, hidden)
        w2, b2 = layer(hidden, d_out)
        return cls(w1, b1, w2, b2)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.w1.shape[0]:
            raise ValueError(f"head expects [B, {self.w1.shape[0]}] input, got {x.shape}")
        return T.linear(T.relu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class ProjectionHeads:
    """Independent appearance and geometric heads mapping count vectors to ``d_feat``."""

    app: Mlp
    geo: Mlp

    @classmethod
    def init(cls, rng, n_classes: int, n_scales: int, d_feat: int = 64, hidden: int = 128) -> "ProjectionHeads":
        return cls(
            Mlp.init(rng, 2 * n_classes * n_scales, hidden, d_feat),
            Mlp.init(rng, 2 * n_scales, hidden, d_feat),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {f"app.{k}": v for k, v in self.app.parameters().items()}
        out.update({f"geo.{k}": v for k, v in self.geo.parameters().items()})
        return out


def _flat_pair(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"count tensors must share a [B, C, k] shape, got {a.shape} and {b.shape}")
    n = a.shape[0]
    return T.concat([T.reshape(a, (n, -1)), T.reshape(b, (n, -1))], axis=1)


def project(n_app_area, n_app_bound, n_geo_area, n_geo_bound, heads: ProjectionHeads):
    """Map the four count tensors to ``(f_app, f_geo, f_dbc)`` with ``f_dbc = [f_app; f_geo]``."""
    app_in = _flat_pair(T.tensor(n_app_area), T.tensor(n_app_bound))
    geo_in = _flat_pair(T.tensor(n_geo_area), T.tensor(n_geo_bound))
    if app_in.shape[0] != geo_in.shape[0]:
        raise ValueError("appearance and geometric counts disagree on batch size")
    f_app = heads.app(app_in)
    f_geo = heads.geo(geo_in)
    return f_app, f_geo, T.concat([f_app, f_geo], axis=1)


# -- dimension estimate -------------------------------------------------------------


def fractal_fit(counts, scales) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares slope of ``log N(s)`` against ``log(1/s)`` and its R^2.

    ``counts`` has the scale axis last; leading axes (e.g. batch, channel)
    are fitted independently.
    """
    n = np.asarray(counts.data if isinstance(counts, Tensor) else counts, dtype=np.float64)
    sizes = np.asarray(_scales(scales).sizes, dtype=np.float64)
    if n.shape[-1] != sizes.size:
        raise ValueError(f"counts have {n.shape[-1]} scales, scale set has {sizes.size}")
    if (n <= 0).any():
        raise UndefinedDimension("undefined dimension: zero count at some scale")
    x = np.log(1.0 / sizes)
    y = np.log(n)
    xc = x - x.mean()
    yc = y - y.mean(axis=-1, keepdims=True)
    slope = (yc * xc).sum(axis=-1) / (xc * xc).sum()
    resid = yc - slope[..., None] * xc
    ss_tot = (yc * yc).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - (resid * resid).sum(axis=-1) / ss_tot, 1.0)
    return slope, r2


def fractal_dimension(counts, scales) -> np.ndarray:
    return fractal_fit(counts, scales)[0]


def sierpinski_carpet(level: int) -> np.ndarray:
    """Binary carpet of side ``3**level`` built by recursive subdivision."""
    grid = np.ones((1, 1), dtype=np.int64)
    for _ in range(level):
        n = grid.shape[0]
        nxt = np.zeros((3 * n, 3 * n), dtype=np.int64)
        for i in range(3):
            for j in range(3):
                if (i, j) != (1, 1):
                    nxt[i * n:(i + 1) * n, j * n:(j + 1) * n] = grid
        grid = nxt
    return grid


def count_rows(counts, scales: Sequence[int]) -> list[tuple[int, int, int, float]]:
    """Flatten a [B, C, k] count array into (batch, channel, scale, count) records."""
    n = np.asarray(counts.data if isinstance(counts, Tensor) else counts)
    rows = []
    for b in range(n.shape[0]):
        for c in range(n.shape[1]):
            for k, s in enumerate(scales):
                rows.append((b, c, int(s), float(n[b, c, k])))
    return rows
