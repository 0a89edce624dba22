"""The four loss terms of the composite segmentation objective and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_FLOOR = 1e-12
LOG_FLOOR = 1e-12
CONTRASTIVE_PIXEL_CAP = 4096
TERMS = ("con", "dist", "align", "ref")


@dataclass(frozen=True)
class LossWeights:
    con: float = 1.0
    dist: float = 1.0
    align: float = 0.5
    ref: float = 0.5
    tau: float = 0.07
    eps: float = 1e-6

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.eps <= 0:
            raise ValueError(f"Dice smoothing must be positive, got {self.eps}")
        if min(self.con, self.dist, self.align, self.ref) < 0:
            raise ValueError("loss weights must be non-negative")

    def weight(self, term: str) -> float:
        return getattr(self, term)


def normalize_rows(x: Tensor) -> Tensor:
    """Unit-normalise the rows of a [N, D] tensor with the norm floored at 1e-12."""
    # floor the squared norm so a zero row never reaches sqrt's infinite slope
    norms = T.sqrt(T.clamp_min(T.reduce_sum(x * x, 1, keepdims=True), NORM_FLOOR * NORM_FLOOR))
    return x / T.expand(norms, x.shape)


def unit_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), NORM_FLOOR)


def _one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((idx.size, n))
    out[np.arange(idx.size), idx] = 1.0
    return out


def contrastive_loss(embeddings: Tensor, assignments, prototypes, tau: float = 0.07) -> Tensor:
    """Pixel-to-prototype InfoNCE with cosine similarity.

    ``embeddings`` is [P, D]; ``assignments`` holds each pixel's prototype
    index; ``prototypes`` is [N, D] and is treated as a constant.
    """
    protos = unit_rows(prototypes.data if isinstance(prototypes, Tensor) else prototypes)
    assignments = np.asarray(assignments, dtype=np.int64).reshape(-1)
    if embeddings.ndim != 2 or embeddings.shape[1] != protos.shape[1]:
        raise ValueError(f"embeddings {embeddings.shape} do not match prototypes {protos.shape}")
    if assignments.size != embeddings.shape[0]:
        raise ValueError("one assignment per pixel is required")
    n = protos.shape[0]
    if assignments.size and (assignments.min() < 0 or assignments.max() >= n):
        raise ValueError(f"assignments must lie in [0, {n})")
    logits = normalize_rows(embeddings) @ Tensor(protos.T) * (1.0 / tau)
    _, logp = T.softmax_log(logits, axis=1)
    picked = T.reduce_sum(logp * Tensor(_one_hot(assignments, n)), 1)
    return -T.mean(picked)


def distillation_loss(p_seg: Tensor, m_pseudo) -> Tensor:
    """Cross-entropy of ``p_seg`` against a stop-gradient one-hot pseudo-label map."""
    target = T.stop_gradient(T.tensor(m_pseudo))
    if target.shape != p_seg.shape:
        raise ValueError(f"prediction {p_seg.shape} and target {target.shape} differ in shape")
    td = target.data
    if not (np.isin(td, (0.0, 1.0)).all() and np.allclose(td.sum(axis=1), 1.0, rtol=0, atol=0)):
        raise ValueError("pseudo labels must be one-hot along the class axis")
    logp = T.log(T.clamp_min(p_seg, LOG_FLOOR))
    per_pixel = T.reduce_sum(target * logp, 1)
    return -T.mean(per_pixel)


def alignment_loss(f_app: Tensor, f_geo: Tensor) -> Tensor:
    """Mean over the batch of ``1 - cos(f_app, f_geo)``."""
    if f_app.shape != f_geo.shape or f_app.ndim != 2:
        raise ValueError(f"feature shapes must match as [B, D], got {f_app.shape} and {f_geo.shape}")
    cos = T.reduce_sum(normalize_rows(f_app) * normalize_rows(f_geo), 1)
    return 1.0 - T.mean(cos)


def refinement_dice_loss(m_seg: Tensor, m_aux: Tensor, eps: float = 1e-6) -> Tensor:
    """Multi-class soft Dice loss between two [B, C, H, W] probability maps.

    Sums run over every pixel of the batch; each class contributes equally.
    """
    if m_seg.shape != m_aux.shape or m_seg.ndim != 4:
        raise ValueError(f"maps must share a [B, C, H, W] shape, got {m_seg.shape} and {m_aux.shape}")
    axes = (0, 2, 3)
    inter = T.reduce_sum(m_seg * m_aux, axes)
    denom = T.reduce_sum(m_seg, axes) + T.reduce_sum(m_aux, axes)
    dice = (inter * 2.0 + eps) / (denom + eps)
    return 1.0 - T.mean(dice)


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict[str, float]:
        out = {f"l_{k}": v for k, v in self.terms.items()}
        out["total"] = self.total.item()
        return out


def galoss(
    *,
    embeddings: Tensor,
    assignments,
    prototypes,
    p_seg: Tensor,
    m_pseudo,
    f_app: Tensor,
    f_geo: Tensor,
    m_seg: Tensor,
    m_aux: Tensor,
    weights: LossWeights = LossWeights(),
    terms=TERMS,
) -> LossBreakdown:
    """Weighted sum of the contrastive, distillation, alignment and refinement terms.

    Every term is evaluated and reported; only those listed in ``terms`` enter
    the returned total, so the rest contribute no gradient.
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    values = {
        "con": contrastive_loss(embeddings, assignments, prototypes, weights.tau),
        "dist": distillation_loss(p_seg, m_pseudo),
        "align": alignment_loss(f_app, f_geo),
        "ref": refinement_dice_loss(m_seg, m_aux, weights.eps),
    }
    total = Tensor(0.0)
    for name in TERMS:
        if name in terms:
            total = total + values[name] * weights.weight(name)
    return LossBreakdown(total, {k: v.item() for k, v in values.items()})
