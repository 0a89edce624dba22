"""Training configuration, the per-batch update and the epoch loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import formats
from .. import tensor as T
from ..boxcount import DEFAULT_SCALES, ScaleSet
from ..errors import InvalidConfig, NonFiniteLoss
from ..evaluation import Metrics, confusion_matrix, metrics_from_confusion
from ..losses import CONTRASTIVE_PIXEL_CAP, TERMS, LossWeights, galoss
from ..morph import AugConfig
from .model import ModelState, forward_student, forward_teacher, init_state, predict_batch

log = logging.getLogger(__name__)

PLACEMENTS = ("stu", "tea", "both")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    n_classes: int = 4
    weights: LossWeights = LossWeights()
    aug: AugConfig = AugConfig()
    scales: ScaleSet = ScaleSet(DEFAULT_SCALES)
    use_topoaug: bool = True
    placement: str = "stu"
    use_dbc: bool = True
    loss_terms: tuple[str, ...] = TERMS
    eval_every: int = 1
    features: int = 16
    d_emb: int = 16
    d_feat: int = 64
    hidden: int = 128
    kernels: tuple[int, int, int] = (3, 3, 1)
    grad_clip: float = 1.0
    teacher_momentum: float = 0.99

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise InvalidConfig("epochs must be >= 0, batch_size >= 1 and lr >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig(f"momentum must lie in [0, 1), got {self.momentum}")
        if len(self.kernels) != 3 or any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise InvalidConfig(f"kernels must be three odd sizes, got {self.kernels}")
        if self.n_classes < 2:
            raise InvalidConfig("at least two clusters are required")
        if self.placement not in PLACEMENTS:
            raise InvalidConfig(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        terms = tuple(t for t in TERMS if t in self.loss_terms)
        if set(self.loss_terms) - set(TERMS):
            raise InvalidConfig(f"unknown loss terms in {self.loss_terms}")
        object.__setattr__(self, "loss_terms", terms)
        if not 0.0 <= self.teacher_momentum < 1.0:
            raise InvalidConfig("teacher_momentum must lie in [0, 1)")
        if self.grad_clip < 0:
            raise InvalidConfig("grad_clip must be >= 0 (0 disables clipping)")
        if self.eval_every < 1:
            raise InvalidConfig("eval_every must be >= 1")

    def teacher_aug(self) -> AugConfig | None:
        return self.aug if self.use_topoaug and self.placement in ("tea", "both") else None

    def student_aug(self) -> AugConfig | None:
        return self.aug if self.use_topoaug and self.placement in ("stu", "both") else None

    def to_mapping(self) -> dict:
        w = self.weights
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "seed": self.seed,
            "n_classes": self.n_classes,
            "lambda_con": w.con,
            "lambda_dist": w.dist,
            "lambda_align": w.align,
            "lambda_ref": w.ref,
            "tau": w.tau,
            "eps": w.eps,
            "op_weights": self.aug.op_weights,
            "p_apply": self.aug.p_apply,
            "se_weights": self.aug.se_weights,
            "aug_seed": self.aug.seed,
            "scales": self.scales.sizes,
            "use_topoaug": self.use_topoaug,
            "placement": self.placement,
            "use_dbc": self.use_dbc,
            "loss_terms": self.loss_terms,
            "eval_every": self.eval_every,
            "features": self.features,
            "d_emb": self.d_emb,
            "d_feat": self.d_feat,
            "hidden": self.hidden,
            "grad_clip": self.grad_clip,
            "teacher_momentum": self.teacher_momentum,
            "kernels": self.kernels,
        }

    def dumps(self) -> str:
        return formats.format_flat_config(self.to_mapping())

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "TrainConfig":
        raw = dict(raw)
        ints = ("epochs", "batch_size", "seed", "n_classes", "eval_every", "features", "d_emb", "d_feat", "hidden")
        floats = ("lr", "momentum", "grad_clip", "teacher_momentum")
        bools = ("use_topoaug", "use_dbc")
        kw: dict = {}
        for k in ints:
            if k in raw:
                kw[k] = formats.config_int(raw.pop(k), k)
        for k in floats:
            if k in raw:
                kw[k] = formats.config_float(raw.pop(k), k)
        for k in bools:
            if k in raw:
                kw[k] = formats.config_bool(raw.pop(k), k)
        if "placement" in raw:
            kw["placement"] = raw.pop("placement")
        if "loss_terms" in raw:
            kw["loss_terms"] = tuple(t.strip() for t in raw.pop("loss_terms").split(",") if t.strip())
        if "kernels" in raw:
            kw["kernels"] = formats.config_ints(raw.pop("kernels"), "kernels")
        if "scales" in raw:
            sizes = formats.config_ints(raw.pop("scales"), "scales")
            try:
                kw["scales"] = ScaleSet(sizes)
            except ValueError as exc:
                raise InvalidConfig(str(exc)) from None
        wkeys = {"lambda_con": "con", "lambda_dist": "dist", "lambda_align": "align",
                 "lambda_ref": "ref", "tau": "tau", "eps": "eps"}
        wkw = {wkeys[k]: formats.config_float(raw.pop(k), k) for k in list(raw) if k in wkeys}
        if wkw:
            try:
                kw["weights"] = LossWeights(**wkw)
            except ValueError as exc:
                raise InvalidConfig(str(exc)) from None
        akw = {k: raw.pop(k) for k in ("op_weights", "p_apply", "se_weights") if k in raw}
        if "aug_seed" in raw:
            akw["seed"] = raw.pop("aug_seed")
        if akw:
            kw["aug"] = AugConfig.from_mapping(akw)
        if raw:
            raise InvalidConfig(f"unknown training keys: {sorted(raw)}")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_mapping(formats.parse_flat_config(Path(path).read_text()))


def new_state(cfg: TrainConfig) -> ModelState:
    state = init_state(
        np.random.default_rng([cfg.seed, 1]),
        cfg.n_classes,
        cfg.scales,
        cfg.features,
        cfg.d_emb,
        cfg.d_feat,
        cfg.hidden,
        cfg.kernels,
    )
    if cfg.teacher_momentum > 0:
        state.teacher = {k: v.data.copy() for k, v in state.params.items() if k.startswith("enc.")}
    return state


def _step_rng(cfg: TrainConfig, epoch: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 2, epoch, step, stream])


def train_step(batch, state: ModelState, cfg: TrainConfig, epoch: int = 0, step: int = 0):
    """One teacher/student forward, composite loss, backward and momentum update.

    Returns the state (updated in place) and the per-term loss values.
    """
    need_dbc_grad = cfg.use_dbc and bool({"align", "ref"} & set(cfg.loss_terms))
    aug_rng = _step_rng(cfg, epoch, step, 0)
    if need_dbc_grad:
        teacher = forward_teacher(batch, state, tau=cfg.weights.tau, use_dbc=cfg.use_dbc,
                                  aug=cfg.teacher_aug(), rng=aug_rng, cluster_seed=[cfg.seed, 3, epoch, step])
    else:
        with T.no_grad():
            teacher = forward_teacher(batch, state, tau=cfg.weights.tau, use_dbc=cfg.use_dbc,
                                      aug=cfg.teacher_aug(), rng=aug_rng, cluster_seed=[cfg.seed, 3, epoch, step])
    state.prototypes = teacher.prototypes
    student = forward_student(batch, state, teacher.f_dbc, aug=cfg.student_aug(), rng=aug_rng)

    n_pix = student.embeddings.shape[0]
    pick = np.arange(n_pix)
    if n_pix > CONTRASTIVE_PIXEL_CAP:
        pick = np.sort(_step_rng(cfg, epoch, step, 1).choice(n_pix, CONTRASTIVE_PIXEL_CAP, replace=False))

    terms = cfg.loss_terms
    if cfg.use_dbc:
        f_app, f_geo = teacher.f_app, teacher.f_geo
    else:
        terms = tuple(t for t in terms if t not in ("align", "ref"))
        zeros = T.Tensor(np.ones((len(batch), 1)))
        f_app = f_geo = zeros
    result = galoss(
        embeddings=student.embeddings[pick],
        assignments=teacher.assignments[pick],
        prototypes=teacher.prototypes,
        p_seg=student.p_seg,
        m_pseudo=teacher.m_pseudo,
        f_app=f_app,
        f_geo=f_geo,
        m_seg=student.m_seg,
        m_aux=student.m_aux,
        weights=cfg.weights,
        terms=terms,
    )
    total = result.total.item()
    if not np.isfinite(total):
        raise NonFiniteLoss(
            f"non-finite loss at epoch {epoch} step {step}",
            {"terms": result.terms, "param_norms": {k: float(np.linalg.norm(v.data)) for k, v in state.params.items()}},
        )
    grads = T.backward(result.total)
    factor = 1.0
    if cfg.grad_clip > 0:
        norm = np.sqrt(sum(float((grads[p] ** 2).sum()) for p in state.params.values()))
        factor = min(1.0, cfg.grad_clip / max(norm, 1e-12))
    for name, param in state.params.items():
        g = grads[param] * factor
        v = state.velocity.get(name)
        v = g if v is None else cfg.momentum * v + g
        state.velocity[name] = v
        state.params[name] = T.Tensor(param.data - cfg.lr * v, requires_grad=True)
    if cfg.teacher_momentum > 0:
        state.update_teacher(cfg.teacher_momentum)
    if not T.parameters_finite(state.params.values()):
        raise NonFiniteLoss(f"non-finite parameters after epoch {epoch} step {step}", {"terms": result.terms})
    return state, result.row()


def evaluate(scenes, state: ModelState, batch_size: int = 32) -> Metrics:
    """Dataset-level Hungarian-matched metrics of the seg-head argmax."""
    conf = np.zeros((state.n_classes, state.n_classes), dtype=np.int64)
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        pred = predict_batch(chunk, state)
        truth = np.stack([s.labels for s in chunk])
        conf += confusion_matrix(pred, truth, state.n_classes, state.n_classes)
    return metrics_from_confusion(conf)


HISTORY_COLUMNS = ("epoch", "acc", "miou", "l_con", "l_dist", "l_align", "l_ref", "total")
STEP_COLUMNS = ("step", "l_con", "l_dist", "l_align", "l_ref", "total")


@dataclass
class TrainResult:
    state: ModelState
    history: list[dict] = field(default_factory=list)
    best_state: ModelState | None = None
    best_miou: float = -1.0
    steps: list[dict] = field(default_factory=list)

    def history_csv(self) -> str:
        rows = ([r[c] for c in HISTORY_COLUMNS] for r in self.history)
        return formats.csv_text(HISTORY_COLUMNS, rows)

    def steps_csv(self) -> str:
        """Per-step loss breakdown; ``step`` counts optimiser updates from 1."""
        rows = ([r[c] for c in STEP_COLUMNS] for r in self.steps)
        return formats.csv_text(STEP_COLUMNS, rows)


def train_loop(corpus, cfg: TrainConfig, state: ModelState | None = None) -> TrainResult:
    """Seeded epoch loop with periodic evaluation; keeps a copy of the best-mIoU state."""
    if not corpus:
        raise ValueError("training corpus is empty")
    state = state or new_state(cfg)
    result = TrainResult(state)
    order_rng = np.random.default_rng([cfg.seed, 4])
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(corpus))
        sums = dict.fromkeys(HISTORY_COLUMNS[3:], 0.0)
        n_steps = 0
        for step, start in enumerate(range(0, len(corpus), cfg.batch_size)):
            batch = [corpus[i] for i in order[start:start + cfg.batch_size]]
            state, row = train_step(batch, state, cfg, epoch, step)
            result.steps.append({"step": len(result.steps) + 1, **row})
            for k in sums:
                sums[k] += row[k]
            n_steps += 1
        record = {"epoch": epoch + 1, **{k: v / n_steps for k, v in sums.items()}}
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            m = evaluate(corpus, state)
            record.update(acc=m.acc, miou=m.miou)
            if m.miou > result.best_miou:
                result.best_miou = m.miou
                result.best_state = state.copy()
        else:
            record.update(acc="", miou="")
        log.info("epoch %d: %s", epoch + 1, record)
        result.history.append(record)
    result.state = state
    return result
