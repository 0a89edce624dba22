"""Toy teacher/student model: shared conv encoder, 1x1 heads and the box-count branch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import boxcount as bc
from .. import tensor as T
from ..boxcount import ProjectionHeads, ScaleSet
from ..morph import AugConfig, topo_augment
from ..tensor import Tensor
from .cluster import prototypical_cluster
from .data import stack_images


@dataclass
class ModelState:
    params: dict[str, Tensor]
    n_classes: int
    scales: ScaleSet
    prototypes: np.ndarray | None = None
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    # slow-moving copy of the encoder used by the teacher path
    teacher: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def heads(self) -> ProjectionHeads:
        p = self.params
        return ProjectionHeads(
            bc.Mlp(p["heads.app.w1"], p["heads.app.b1"], p["heads.app.w2"], p["heads.app.b2"]),
            bc.Mlp(p["heads.geo.w1"], p["heads.geo.b1"], p["heads.geo.w2"], p["heads.geo.b2"]),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        if self.prototypes is not None:
            out["prototypes"] = self.prototypes
        out.update({f"teacher.{k}": v for k, v in self.teacher.items()})
        out["scales"] = np.asarray(self.scales.sizes, dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelState":
        arrays = dict(arrays)
        protos = arrays.pop("prototypes", None)
        scales = ScaleSet(tuple(int(s) for s in arrays.pop("scales")))
        teacher = {k[8:]: arrays.pop(k) for k in list(arrays) if k.startswith("teacher.")}
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(params, params["seg.cls_b"].shape[0], scales, protos, teacher=teacher)

    def copy(self) -> "ModelState":
        return ModelState(
            {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()},
            self.n_classes,
            self.scales,
            None if self.prototypes is None else self.prototypes.copy(),
            {k: v.copy() for k, v in self.velocity.items()},
            {k: v.copy() for k, v in self.teacher.items()},
        )

    def teacher_params(self) -> dict[str, Tensor]:
        """Encoder weights seen by the teacher: the slow copy when present, else the live ones."""
        if not self.teacher:
            return self.params
        out = dict(self.params)
        out.update({k: Tensor(v) for k, v in self.teacher.items()})
        return out

    def update_teacher(self, momentum: float) -> None:
        """Move the teacher's encoder copy towards the live encoder by ``1 - momentum``."""
        for k, v in self.params.items():
            if not k.startswith("enc."):
                continue
            old = self.teacher.get(k)
            self.teacher[k] = v.data.copy() if old is None else momentum * old + (1.0 - momentum) * v.data


def init_state(
    rng: np.random.Generator,
    n_classes: int = 4,
    scales: ScaleSet = ScaleSet(),
    features: int = 16,
    d_emb: int = 16,
    d_feat: int = 64,
    hidden: int = 128,
    kernels: tuple[int, int, int] = (3, 3, 3),
) -> ModelState:
    def he(*shape, fan_in):
        return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    params = {
        "enc.w1": he(features, 3, kernels[0], kernels[0], fan_in=3 * kernels[0] ** 2),
        "enc.b1": zeros(features),
        "enc.w2": he(features, features, kernels[1], kernels[1], fan_in=features * kernels[1] ** 2),
        "enc.b2": zeros(features),
        "enc.w3": he(features, features, kernels[2], kernels[2], fan_in=features * kernels[2] ** 2),
        "enc.b3": zeros(features),
        "pseudo.w": he(features, d_emb, fan_in=features),
        "pseudo.b": zeros(d_emb),
        "seg.w": he(features, d_emb, fan_in=features),
        "seg.b": zeros(d_emb),
        "seg.cls_w": he(d_emb, n_classes, fan_in=d_emb),
        "seg.cls_b": zeros(n_classes),
        "aux.w": he(features, n_classes, fan_in=features),
        "aux.wd": he(2 * d_feat, n_classes, fan_in=2 * d_feat),
        "aux.b": zeros(n_classes),
    }
    heads = ProjectionHeads.init(rng, n_classes, len(scales), d_feat, hidden)
    params.update({f"heads.{k}": v for k, v in heads.parameters().items()})
    return ModelState(params, n_classes, scales)


def encode(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Three same-size 3x3 conv layers; returns per-pixel features as [B*H*W, F]."""
    h = T.relu(T.conv2d(x, p["enc.w1"], p["enc.b1"]))
    h = T.relu(T.conv2d(h, p["enc.w2"], p["enc.b2"]))
    h = T.conv2d(h, p["enc.w3"], p["enc.b3"])
    b, f, hh, ww = h.shape
    return T.reshape(T.transpose(h, (0, 2, 3, 1)), (b * hh * ww, f))


def to_maps(rows: Tensor, b: int, h: int, w: int) -> Tensor:
    """[B*H*W, C] pixel rows -> [B, C, H, W] maps."""
    return T.transpose(T.reshape(rows, (b, h, w, rows.shape[1])), (0, 3, 1, 2))


def seg_logits(feats: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    emb = T.linear(feats, p["seg.w"], p["seg.b"])
    return emb, T.linear(emb, p["seg.cls_w"], p["seg.cls_b"])


def augment_batch(scenes, aug: AugConfig | None, rng: np.random.Generator | None) -> np.ndarray:
    if aug is None:
        return stack_images(scenes)
    images = [topo_augment(s.image, aug, rng) for s in scenes]
    return np.stack(images).transpose(0, 3, 1, 2).astype(np.float64) / 255.0 - 0.5


@dataclass
class TeacherOutput:
    embeddings: Tensor  # [P, D_emb]
    assignments: np.ndarray  # [P]
    m_pseudo: np.ndarray  # [B, C, H, W] one-hot
    soft_probs: Tensor  # [B, C, H, W]
    prototypes: np.ndarray
    f_app: Tensor | None
    f_geo: Tensor | None
    f_dbc: Tensor | None


def descriptors(soft_probs: Tensor, depth: np.ndarray, state: ModelState):
    """Four normalised count tensors projected to ``(f_app, f_geo, f_dbc)``."""
    b, c, h, w = soft_probs.shape
    sc = state.scales
    d = Tensor(depth)
    counts = [
        bc.app_area_counts(soft_probs, sc),
        bc.app_boundary_counts(soft_probs, sc),
        bc.geo_roughness_counts(d, sc),
        bc.geo_edge_counts(d, sc),
    ]
    counts = [bc.occupancy_fraction(n, sc, h, w) for n in counts]
    return bc.project(*counts, state.heads)


def forward_teacher(
    scenes,
    state: ModelState,
    *,
    tau: float = 0.07,
    use_dbc: bool = True,
    aug: AugConfig | None = None,
    rng: np.random.Generator | None = None,
    cluster_seed=0,
) -> TeacherOutput:
    """Encoder -> pseudo head -> prototypical clustering -> box-count descriptors.

    Prototypes from the previous call warm-start the clustering. Pseudo
    labels and prototypes are plain arrays: they carry no gradient.
    """
    x = Tensor(augment_batch(scenes, aug, rng))
    b, _, h, w = x.shape
    feats = encode(x, state.teacher_params())
    emb = T.linear(feats, state.params["pseudo.w"], state.params["pseudo.b"])
    cl = prototypical_cluster(emb, state.n_classes, cluster_seed, tau, init=state.prototypes)
    soft = to_maps(cl.soft_probs, b, h, w)
    m_pseudo = cl.one_hot.reshape(b, h, w, -1).transpose(0, 3, 1, 2)
    f_app = f_geo = f_dbc = None
    if use_dbc:
        depth = np.stack([s.depth for s in scenes])
        f_app, f_geo, f_dbc = descriptors(soft, depth, state)
    return TeacherOutput(emb, cl.assignments, m_pseudo, soft, cl.prototypes, f_app, f_geo, f_dbc)


@dataclass
class StudentOutput:
    embeddings: Tensor  # [P, D_emb]
    p_seg: Tensor  # [B, C, H, W]
    m_seg: Tensor
    m_aux: Tensor


def forward_student(
    scenes,
    state: ModelState,
    f_dbc: Tensor | None,
    *,
    aug: AugConfig | None = None,
    rng: np.random.Generator | None = None,
) -> StudentOutput:
    """Augmented image -> encoder -> seg head; aux head fuses features with ``f_dbc``.

    The fusion is a 1x1 projection of ``[features; broadcast f_dbc]``,
    computed as a per-pixel term plus a per-image term. Without ``f_dbc`` the
    aux head sees the encoder features alone.
    """
    p = state.params
    x = Tensor(augment_batch(scenes, aug, rng))
    b, _, h, w = x.shape
    feats = encode(x, p)
    emb, logits = seg_logits(feats, p)
    probs, _ = T.softmax_log(logits, axis=1)
    p_seg = to_maps(probs, b, h, w)

    aux_logits = T.linear(feats, p["aux.w"], p["aux.b"])
    if f_dbc is not None:
        per_image = T.matmul(f_dbc, p["aux.wd"])  # [B, C]
        c = per_image.shape[1]
        spread = T.expand(T.reshape(per_image, (b, 1, c)), (b, h * w, c))
        aux_logits = aux_logits + T.reshape(spread, (b * h * w, c))
    aux_probs, _ = T.softmax_log(aux_logits, axis=1)
    return StudentOutput(emb, p_seg, p_seg, to_maps(aux_probs, b, h, w))


def predict_batch(scenes_or_images, state: ModelState) -> np.ndarray:
    """Per-pixel argmax of the seg head, [B, H, W]; no box counting, no augmentation."""
    if isinstance(scenes_or_images, np.ndarray):
        imgs = scenes_or_images
        x = imgs.transpose(0, 3, 1, 2).astype(np.float64) / 255.0 - 0.5
    else:
        x = stack_images(scenes_or_images)
    b, _, h, w = x.shape
    with T.no_grad():
        _, logits = seg_logits(encode(Tensor(x), state.params), state.params)
    return np.argmax(logits.data, axis=1).reshape(b, h, w)


def infer(image: np.ndarray, state: ModelState) -> np.ndarray:
    """Label map for one (H, W, 3) uint8 image."""
    return predict_batch(np.asarray(image)[None], state)[0]
