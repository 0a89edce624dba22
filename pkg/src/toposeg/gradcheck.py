"""Finite-difference audit of every differentiable operation and loss term.

Each case builds a scalar function of one input from a seeded generator.
Inputs are drawn with well separated values (no ties inside max windows) and
kept away from clamp floors, so central differences are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import boxcount as bc
from . import losses as L
from . import tensor as T
from .tensor import Tensor

THRESHOLD = 1e-4
N_SEEDS = 10
STEP = 1e-5
SCALES = (1, 2, 4)

Case = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _distinct(rng, shape, lo=0.1, hi=0.9) -> np.ndarray:
    """Values on a jittered grid: every pair differs by at least 0.6 of the grid spacing."""
    n = int(np.prod(shape))
    slots = rng.permutation(n) + 0.5 + rng.uniform(-0.2, 0.2, size=n)
    return (lo + (hi - lo) * slots / n).reshape(shape)


def _away(rng, shape, gap=0.05) -> np.ndarray:
    """Normal draws pushed at least ``gap`` away from zero."""
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + gap, x - gap)


def _probe(rng, out_shape):
    """Fixed random weights reducing an output to a scalar."""
    w = Tensor(rng.normal(size=out_shape))
    return lambda y: T.reduce_sum(y * w)


def _unary(op, make_input, out_shape=None):
    def case(rng):
        x = make_input(rng)
        probe = _probe(rng, out_shape(x.shape) if out_shape else x.shape)
        return (lambda t: probe(op(t))), x

    return case


def _binary(op, first: bool, shape=(3, 4), other_lo=None):
    def case(rng):
        a = rng.normal(size=shape)
        b = rng.uniform(0.5, 2.0, size=shape) if other_lo else rng.normal(size=shape)
        probe = _probe(rng, shape)
        if first:
            return (lambda t: probe(op(t, Tensor(b)))), a
        return (lambda t: probe(op(Tensor(a), t))), b

    return case


def _map(rng, shape=(2, 2, 8, 8)):
    return _distinct(rng, shape)


def _depth(rng, shape=(2, 1, 8, 8)):
    return _distinct(rng, shape)


def _probs(rng, shape=(2, 3, 8, 8)):
    return _distinct(rng, shape, 0.05, 0.95)


def _counts_case(fn, make_input, n_scales=len(SCALES)):
    def case(rng):
        x = make_input(rng)
        probe = _probe(rng, (x.shape[0], x.shape[1], n_scales))
        return (lambda t: probe(fn(t, SCALES))), x

    return case


def _conv_case(wrt: str):
    def case(rng):
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        probe = _probe(rng, (2, 3, 5, 5))
        if wrt == "x":
            return (lambda t: probe(T.conv2d(t, Tensor(w), Tensor(b)))), x
        if wrt == "w":
            return (lambda t: probe(T.conv2d(Tensor(x), t, Tensor(b)))), w
        return (lambda t: probe(T.conv2d(Tensor(x), Tensor(w), t))), b

    return case


def _linear_case(rng):
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(5, 3))
    probe = _probe(rng, (4, 3))
    b = Tensor(rng.normal(size=3))
    return (lambda t: probe(T.linear(Tensor(x), t, b))), w


def _mlp_case(rng):
    mlp = bc.Mlp.init(rng, 6, 8, 4)
    x = rng.uniform(0.05, 0.95, size=(3, 6))
    # redraw until every hidden pre-activation sits clear of the rectifier kink
    while np.abs(x @ mlp.w1.data + mlp.b1.data).min() < 0.02:
        x = rng.uniform(0.05, 0.95, size=(3, 6))
    probe = _probe(rng, (3, 4))
    return (lambda t: probe(mlp(t))), x


def _project_case(rng):
    n_classes, k = 3, len(SCALES)
    heads = bc.ProjectionHeads.init(rng, n_classes, k, d_feat=4, hidden=6)
    geo_a = Tensor(rng.uniform(0.1, 0.9, size=(2, 1, k)))
    geo_b = Tensor(rng.uniform(0.1, 0.9, size=(2, 1, k)))
    app_b = Tensor(rng.uniform(0.1, 0.9, size=(2, n_classes, k)))
    probe = _probe(rng, (2, 8))
    x = rng.uniform(0.1, 0.9, size=(2, n_classes, k))
    return (lambda t: probe(bc.project(t, app_b, geo_a, geo_b, heads)[2])), x


def _softmax_case(which: int):
    def case(rng):
        x = rng.normal(size=(4, 5))
        probe = _probe(rng, (4, 5))
        return (lambda t: probe(T.softmax_log(t, axis=1)[which])), x

    return case


def _contrastive_case(rng):
    emb = rng.normal(size=(12, 4))
    protos = rng.normal(size=(3, 4))
    assign = rng.integers(0, 3, size=12)
    return (lambda t: L.contrastive_loss(t, assign, protos, 0.07)), emb


def _one_hot_map(rng, shape):
    b, c, h, w = shape
    idx = rng.integers(0, c, size=(b, h, w))
    return np.moveaxis(np.eye(c)[idx], -1, 1)


def _distill_case(rng):
    p = rng.uniform(0.05, 0.95, size=(2, 3, 4, 4))
    target = _one_hot_map(rng, p.shape)
    return (lambda t: L.distillation_loss(t, target)), p


def _align_case(first: bool):
    def case(rng):
        a = rng.normal(size=(3, 6))
        b = rng.normal(size=(3, 6))
        if first:
            return (lambda t: L.alignment_loss(t, Tensor(b))), a
        return (lambda t: L.alignment_loss(Tensor(a), t)), b

    return case


def _dice_case(first: bool):
    def case(rng):
        a = rng.uniform(0.05, 0.95, size=(2, 3, 4, 4))
        b = rng.uniform(0.05, 0.95, size=(2, 3, 4, 4))
        if first:
            return (lambda t: L.refinement_dice_loss(t, Tensor(b))), a
        return (lambda t: L.refinement_dice_loss(Tensor(a), t)), b

    return case


def _galoss_case(rng):
    """Composite loss as a function of the student's shared seg logits."""
    b, c, h, w = 2, 3, 4, 4
    logits = rng.normal(size=(b * h * w, c))
    protos = rng.normal(size=(c, c))
    assign = rng.integers(0, c, size=b * h * w)
    target = _one_hot_map(rng, (b, c, h, w))
    aux = Tensor(rng.uniform(0.05, 0.95, size=(b, c, h, w)))
    f_geo = Tensor(rng.normal(size=(b, 5)))
    f_app_w = Tensor(rng.normal(size=(c, 5)))

    def f(t):
        probs, _ = T.softmax_log(t, axis=1)
        maps = T.transpose(T.reshape(probs, (b, h, w, c)), (0, 3, 1, 2))
        pooled = T.reshape(T.mean(T.reshape(probs, (b, h * w, c)), 1), (b, c))
        return L.galoss(
            embeddings=t,
            assignments=assign,
            prototypes=protos,
            p_seg=maps,
            m_pseudo=target,
            f_app=pooled @ f_app_w,
            f_geo=f_geo,
            m_seg=maps,
            m_aux=aux,
        ).total

    return f, logits


def _variance_input(rng):
    return _distinct(rng, (2, 1, 8, 8))


CASES: dict[str, Case] = {
    "add": _binary(T.add, True),
    "sub": _binary(T.sub, False),
    "mul[a]": _binary(T.mul, True),
    "mul[b]": _binary(T.mul, False),
    "div[a]": _binary(T.div, True, other_lo=True),
    "div[b]": _binary(T.div, False, other_lo=True),
    "scale": _unary(lambda t: T.scale(t, -1.7), lambda r: r.normal(size=(3, 4))),
    "shift": _unary(lambda t: T.shift(t, 0.3), lambda r: r.normal(size=(3, 4))),
    "exp": _unary(T.exp, lambda r: r.normal(size=(3, 4))),
    "log": _unary(T.log, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "sqrt": _unary(T.sqrt, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "relu": _unary(T.relu, lambda r: _away(r, (3, 4))),
    "clamp_min": _unary(lambda t: T.clamp_min(t, 0.0), lambda r: _away(r, (3, 4))),
    "reduce_sum": _unary(lambda t: T.reduce_sum(t, (0, 2)), lambda r: r.normal(size=(2, 3, 4)), lambda s: (3,)),
    "mean": _unary(lambda t: T.mean(t, 1, keepdims=True), lambda r: r.normal(size=(2, 3, 4)), lambda s: (2, 1, 4)),
    "reshape": _unary(lambda t: T.reshape(t, (4, 6)), lambda r: r.normal(size=(2, 3, 4)), lambda s: (4, 6)),
    "transpose": _unary(lambda t: T.transpose(t, (2, 0, 1)), lambda r: r.normal(size=(2, 3, 4)), lambda s: (4, 2, 3)),
    "concat": _unary(lambda t: T.concat([t, t * t], axis=1), lambda r: r.normal(size=(2, 3)), lambda s: (2, 6)),
    "expand": _unary(lambda t: T.expand(t, (2, 3, 4)), lambda r: r.normal(size=(2, 1, 4)), lambda s: (2, 3, 4)),
    "getitem": _unary(lambda t: t[:, 1:3], lambda r: r.normal(size=(3, 4)), lambda s: (3, 2)),
    "matmul": _unary(lambda t: t @ Tensor(np.arange(12.0).reshape(4, 3) / 7), lambda r: r.normal(size=(3, 4)), lambda s: (3, 3)),
    "linear": _linear_case,
    "softmax": _softmax_case(0),
    "log_softmax": _softmax_case(1),
    "block_max_pool": _unary(lambda t: T.block_max_pool(t, 3), _map, lambda s: (2, 2, 3, 3)),
    "pad_edge": _unary(lambda t: T.pad_edge(t, 2), _map, lambda s: (2, 2, 12, 12)),
    "sliding_max": _unary(lambda t: T.sliding_max(t, 3), _map),
    "sliding_min": _unary(lambda t: T.sliding_min(t, 5), _map),
    "mean_filter_3x3": _unary(T.mean_filter_3x3, _depth),
    "conv2d_fixed": _unary(lambda t: T.conv2d_fixed(t, bc.SOBEL_X), _depth),
    "conv2d[x]": _conv_case("x"),
    "conv2d[w]": _conv_case("w"),
    "conv2d[b]": _conv_case("b"),
    "normalize_rows": _unary(L.normalize_rows, lambda r: r.normal(size=(4, 3))),
    "dbc": _counts_case(bc.dbc_multiscale, _map),
    "soft_morph_gradient": _unary(bc.soft_morph_gradient, _map),
    "local_variance": _unary(bc.local_variance, _variance_input),
    "sobel_magnitude": _unary(bc.sobel_magnitude, _depth),
    "app_area_counts": _counts_case(bc.app_area_counts, _probs),
    "app_boundary_counts": _counts_case(bc.app_boundary_counts, _probs),
    "geo_roughness_counts": _counts_case(bc.geo_roughness_counts, _depth),
    "geo_edge_counts": _counts_case(bc.geo_edge_counts, _depth),
    "occupancy_fraction": _unary(
        lambda t: bc.occupancy_fraction(t, SCALES, 8, 8), lambda r: r.uniform(0, 64, size=(2, 3, 3))
    ),
    "mlp": _mlp_case,
    "project": _project_case,
    "contrastive_loss": _contrastive_case,
    "distillation_loss": _distill_case,
    "alignment_loss[app]": _align_case(True),
    "alignment_loss[geo]": _align_case(False),
    "refinement_dice_loss[seg]": _dice_case(True),
    "refinement_dice_loss[aux]": _dice_case(False),
    "galoss": _galoss_case,
}


@dataclass
class CheckResult:
    name: str
    max_error: float
    errors: list[float]

    @property
    def passed(self) -> bool:
        return self.max_error < THRESHOLD

    def as_dict(self) -> dict:
        return {"name": self.name, "max_rel_error": self.max_error, "passed": self.passed}


def run_case(name: str, seed: int = 0, n_seeds: int = N_SEEDS) -> CheckResult:
    errors = []
    for i in range(n_seeds):
        rng = np.random.default_rng([seed, i])
        f, x = CASES[name](rng)
        errors.append(T.grad_check(f, x, STEP))
    return CheckResult(name, max(errors), errors)


def run_suite(seed: int = 0, n_seeds: int = N_SEEDS, names=None) -> list[CheckResult]:
    """Run every registered case (or ``names``) over ``n_seeds`` seeded inputs."""
    return [run_case(n, seed, n_seeds) for n in (names or CASES)]
