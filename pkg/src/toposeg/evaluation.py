"""Hungarian-matched pixel accuracy and mIoU for unsupervised segmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_TIE_TOL = 1e-9


def _solve(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """O(n^3) shortest-augmenting-path Hungarian method on a square matrix.

    Returns ``assign`` with ``assign[row] = column`` and the optimal cost.
    """
    assign, total, _, _ = _solve_dual(cost)
    return assign, total


def _solve_dual(cost: np.ndarray):
    """:func:`_solve` plus the optimal row and column potentials.

    With potentials ``u, v`` an assignment is optimal exactly when every
    chosen entry satisfies ``cost[i, j] == u[i] + v[j]``.
    """
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0, np.zeros(0), np.zeros(0)
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[col] = row, 1-based, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assign = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[match[j] - 1] = j - 1
    return assign, float(cost[np.arange(n), assign].sum()), u[1:].copy(), v[1:].copy()


def hungarian_match(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect assignment of rows to columns.

    Rectangular inputs are padded with zero-cost dummy rows/columns; the
    returned permutation covers the padded square. Among optimal
    assignments the lexicographically smallest one is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    n = max(cost.shape)
    square = np.zeros((n, n))
    square[: cost.shape[0], : cost.shape[1]] = cost
    _, best = _solve(square)
    tol = _TIE_TOL * max(1.0, np.abs(square).max(initial=0.0))

    # fix rows in order, taking the smallest column that still admits an optimum
    perm = np.zeros(n, dtype=np.int64)
    rows_left = list(range(n))
    cols_left = list(range(n))
    spent = 0.0
    for i in range(n):
        rows_left.remove(i)
        for j in sorted(cols_left):
            rest = [c for c in cols_left if c != j]
            sub = square[np.ix_(rows_left, rest)]
            _, sub_cost = _solve(sub)
            if spent + square[i, j] + sub_cost <= best + tol:
                perm[i] = j
                spent += square[i, j]
                cols_left.remove(j)
                break
    return perm, float(square[np.arange(n), perm].sum())


def confusion_matrix(pred, truth, n_pred: int, n_true: int) -> np.ndarray:
    """Counts of (predicted cluster, true class) pairs, shape [n_pred, n_true]."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth must have the same number of pixels")
    if pred.size and (pred.min() < 0 or pred.max() >= n_pred):
        raise ValueError(f"predicted labels must lie in [0, {n_pred})")
    if truth.size and (truth.min() < 0 or truth.max() >= n_true):
        raise ValueError(f"true labels must lie in [0, {n_true})")
    flat = pred.astype(np.int64) * n_true + truth.astype(np.int64)
    return np.bincount(flat, minlength=n_pred * n_true).reshape(n_pred, n_true)


@dataclass
class Metrics:
    acc: float
    miou: float
    per_class_iou: list[float | None]
    mapping: list[int]
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {
            "acc": self.acc,
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "mapping": self.mapping,
        }


def _restrict(cost: np.ndarray, secondary: np.ndarray, tol: float) -> np.ndarray:
    """``secondary`` on entries that can appear in some optimum of ``cost``, a prohibitive value elsewhere."""
    _, _, u, v = _solve_dual(cost)
    tight = np.abs(cost - u[:, None] - v[None, :]) <= tol
    barrier = 2.0 * np.abs(secondary).sum() + 1.0
    return np.where(tight, secondary, barrier)


def _match_clusters(conf: np.ndarray) -> np.ndarray:
    """Cluster-to-class matching that does not depend on how clusters are numbered.

    The matching maximises joint mass. Among those, it maximises the summed
    IoU. Among those, it pairs the most empty clusters with absent classes.
    Any matching that remains tied scores the same accuracy and mIoU, and the
    lexicographically smallest of them is returned.
    """
    n_pred, n_true = conf.shape
    n = max(n_pred, n_true)
    sq = np.zeros((n, n))
    sq[:n_pred, :n_true] = conf
    rows, cols = sq.sum(axis=1), sq.sum(axis=0)
    union = rows[:, None] + cols[None, :] - sq
    iou = np.divide(sq, union, out=np.zeros_like(sq), where=union > 0)
    counted = (union > 0).astype(np.float64)
    counted[:, n_true:] = 0.0  # dummy classes are never scored

    cost = _restrict(-sq, -iou, 0.5)  # masses are integers
    cost = _restrict(cost, counted, 1e-9 * n)
    perm, _ = hungarian_match(cost)
    return perm


def metrics_from_confusion(conf: np.ndarray) -> Metrics:
    """Match clusters to classes by maximum joint mass, then score.

    ``mapping[c]`` is the predicted cluster matched to true class ``c``
    (-1 when the class is matched to a dummy). Classes with an empty union
    are reported as ``None`` and left out of the mean.
    """
    conf = np.asarray(conf, dtype=np.int64)
    n_pred, n_true = conf.shape
    perm = _match_clusters(conf)
    mapping = []
    matched = 0
    ious: list[float | None] = []
    for c in range(n_true):
        rows = np.nonzero(perm == c)[0]
        p = int(rows[0]) if rows.size and rows[0] < n_pred else -1
        mapping.append(p)
        tp = int(conf[p, c]) if p >= 0 else 0
        fp = int(conf[p].sum()) - tp if p >= 0 else 0
        fn = int(conf[:, c].sum()) - tp
        matched += tp
        union = tp + fp + fn
        ious.append(tp / union if union else None)
    total = int(conf.sum())
    valid = [x for x in ious if x is not None]
    return Metrics(
        acc=matched / total if total else 0.0,
        miou=float(np.mean(valid)) if valid else 0.0,
        per_class_iou=ious,
        mapping=mapping,
        confusion=conf,
    )


def metrics(pred, truth, n_classes: int, n_pred: int | None = None) -> Metrics:
    """Pixel accuracy and mIoU after Hungarian matching over all given pixels."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    return metrics_from_confusion(confusion_matrix(pred, truth, n_pred or n_classes, n_classes))
