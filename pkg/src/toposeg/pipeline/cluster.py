"""Spherical k-means over pixel embeddings for pseudo-labels and prototypes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..losses import normalize_rows, unit_rows
from ..tensor import Tensor

MAX_ITER = 50
TOL = 1e-6
FIT_CAP = 4096


@dataclass
class Clustering:
    prototypes: np.ndarray  # [C, D], unit rows
    assignments: np.ndarray  # [P]
    one_hot: np.ndarray  # [P, C]
    soft_probs: Tensor  # [P, C], differentiable w.r.t. the embeddings


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[int(rng.integers(len(x)))]]
    for _ in range(1, k):
        sims = x @ np.array(centers).T
        dist = np.clip(1.0 - sims.max(axis=1), 0.0, None)
        total = dist.sum()
        if total <= 0:
            centers.append(x[int(rng.integers(len(x)))])
        else:
            centers.append(x[int(rng.choice(len(x), p=dist / total))])
    return np.array(centers)


def spherical_kmeans(x: np.ndarray, k: int, rng: np.random.Generator, init: np.ndarray | None = None) -> np.ndarray:
    """Cosine k-means on unit rows; returns unit centroids.

    An empty cluster is re-seeded at the point farthest from its centroid.
    """
    centers = unit_rows(init) if init is not None else _kmeans_pp(x, k, rng)
    for _ in range(MAX_ITER):
        assign = np.argmax(x @ centers.T, axis=1)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        counts = np.bincount(assign, minlength=k)
        for j in np.nonzero(counts == 0)[0]:
            far = int(np.argmin((x * centers[assign]).sum(axis=1)))
            sums[j] = x[far]
        new = unit_rows(np.where(np.linalg.norm(sums, axis=1, keepdims=True) > 0, sums, centers))
        shift = np.abs(new - centers).max()
        centers = new
        if shift < TOL:
            break
    return centers


def prototypical_cluster(
    embeddings: Tensor,
    n_clusters: int,
    seed=0,
    tau: float = 0.07,
    init: np.ndarray | None = None,
    fit_cap: int = FIT_CAP,
) -> Clustering:
    """Cluster [P, D] embeddings into ``n_clusters`` prototypes.

    Centroids are fitted on at most ``fit_cap`` sampled rows, then every row
    is assigned to its most similar prototype (ties go to the lowest index).
    ``init`` warm-starts the centroids, which keeps cluster indices stable
    across calls; otherwise k-means++ seeding is used.
    """
    p = embeddings.shape[0]
    if p < n_clusters:
        raise ValueError(f"need at least {n_clusters} embeddings, got {p}")
    rng = np.random.default_rng(seed)
    x = unit_rows(embeddings.data)
    fit = x if p <= fit_cap else x[np.sort(rng.choice(p, fit_cap, replace=False))]
    protos = spherical_kmeans(fit, n_clusters, rng, init)
    assign = np.argmax(x @ protos.T, axis=1)
    one_hot = np.zeros((p, n_clusters))
    one_hot[np.arange(p), assign] = 1.0
    logits = normalize_rows(embeddings) @ Tensor(protos.T) * (1.0 / tau)
    soft, _ = T.softmax_log(logits, axis=1)
    return Clustering(protos, assign, one_hot, soft)
