"""Model assembly, Adam with per-group learning rates, checkpoints, training and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import binfmt, nn
from .alignment import AlignmentConfig, loss_seen, loss_total, loss_unseen, predict, similarity_matrix
from .backbones import ImageEncoder, PointEncoder, encode_image, encode_points, init_image_encoder, init_point_encoder
from .geometry import gather_image_features, project_points
from .metrics import ConfusionMatrix, EvalReport
from .semantic import ClassVocabulary, SemanticHead, init_semantic_head, semantic_forward
from .sgvf import (SgvfParams, concat_baseline, cross_attention_variant, init_sgvf, point_only_fusion,
                   sgvf_forward, sgvf_plus_self_attention_variant)
from .svfe import SvfeParams, apply_svfe, enhance_points, enhance_semantic, init_svfe
from .synthscene import Scene, ground_truth_sealed
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "no_sgvf", "no_svfe", "no_image", "svfe_self_attn", "sgvf_cross_attn", "sgvf_plus_self_attn")
BACKBONE_GROUP = "backbone"
FUSION_GROUP = "svfe_sgvf"
CHECKPOINT_MAGIC = b"ZS3C"
CHECKPOINT_VERSION = 1

_SGVF_VARIANT = {
    "full": "sgvf",
    "no_svfe": "sgvf",
    "svfe_self_attn": "sgvf",
    "no_sgvf": "concat_baseline",
    "no_image": "concat_baseline",
    "sgvf_cross_attn": "cross_attention_only",
    "sgvf_plus_self_attn": "sgvf_plus_self_attention",
}


class DivergenceError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def check_ablation(name: str) -> str:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; valid names: {', '.join(ABLATIONS)}")
    return name


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr_backbone: float = 1e-3
    lr_svfe_sgvf: float = 3e-4
    tau: float = 0.1
    similarity: str = "dot_product"
    seed: int = 0
    ablation: str = "full"
    svfe_order: str = "points_first"
    checkpoint_every: int = 0
    max_steps: int = 0
    precision: str = "float32"
    dim: int = 128
    heads: int = 4
    td_hidden: int = 512

    def __post_init__(self):
        check_ablation(self.ablation)
        if self.lr_backbone <= 0 or self.lr_svfe_sgvf <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        AlignmentConfig(self.tau, self.similarity)

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def hash(self) -> str:
        return config_hash(asdict(self))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# model


@dataclass
class ModelState:
    point_encoder: PointEncoder
    image_encoder: ImageEncoder | None
    semantic_head: SemanticHead
    svfe: SvfeParams | None
    sgvf: SgvfParams
    similarity: str = "dot_product"

    def named_parameters(self):
        return list(nn.named_parameters(self))

    def parameter_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Backbones train at the backbone rate; G, SVFE and SGVF at the fusion rate."""
        groups: dict[str, list[tuple[str, Tensor]]] = {BACKBONE_GROUP: [], FUSION_GROUP: []}
        for name, t in self.named_parameters():
            top = name.split(".", 1)[0]
            groups[BACKBONE_GROUP if top in ("point_encoder", "image_encoder") else FUSION_GROUP].append((name, t))
        return groups

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def init_model(attr_channels: int, image_channels: int, embed_dim: int, ablation: str = "full", seed: int = 0,
               dim: int = 128, heads: int = 4, td_hidden: int | None = None, svfe_order: str = "points_first",
               dtype=np.float64, similarity: str = "dot_product") -> ModelState:
    """Build the parameters an ablation needs; the same seed always gives the same values."""
    check_ablation(ablation)
    rng = np.random.default_rng(seed)
    with_image = ablation != "no_image"
    point_encoder = init_point_encoder(rng, attr_channels, dim, dtype)
    image_encoder = init_image_encoder(rng, image_channels, dim, dtype) if with_image else None
    head = init_semantic_head(rng, embed_dim, out=dim, dtype=dtype)
    svfe = None
    if ablation != "no_svfe":
        variant = "self_attention_only" if ablation == "svfe_self_attn" else "cross_attention"
        svfe = init_svfe(rng, dim, heads, td_hidden, with_image, svfe_order, variant, dtype)
    sgvf = init_sgvf(rng, dim, heads, _SGVF_VARIANT[ablation], td_hidden, dtype)
    return ModelState(point_encoder, image_encoder, head, svfe, sgvf, similarity)


def init_model_for(config: TrainConfig, vocab: ClassVocabulary, scene: Scene) -> ModelState:
    return init_model(scene.attrs.shape[1], scene.X.shape[2], vocab.embed_dim, config.ablation, config.seed,
                      config.dim, config.heads, config.td_hidden, config.svfe_order, config.dtype, config.similarity)


@dataclass
class ForwardResult:
    fusion: Tensor  # [T, d]
    F_es: Tensor  # [C, d]
    F_s: Tensor
    F_l: Tensor
    F_el: Tensor
    F_i_pts: Tensor | None
    F_ei: Tensor | None
    valid: np.ndarray


def forward_scene(model: ModelState, scene: Scene, embeddings, ablation: str = "full") -> ForwardResult:
    """Backbones -> SVFE -> SGVF for one scene, wired per ``ablation``."""
    check_ablation(ablation)
    dtype = model.point_encoder.mlp.layers[0].weight.dtype
    W = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings, dtype=dtype)
    F_s = semantic_forward(model.semantic_head, W)
    F_l = encode_points(model.point_encoder, scene.P, Tensor(scene.attrs, dtype=dtype))
    proj = project_points(scene.P, scene.cam)
    valid = proj.valid

    F_i_pts = None
    if ablation != "no_image":
        if model.image_encoder is None:
            raise ValueError(f"ablation {ablation!r} needs an image encoder")
        F_img = encode_image(model.image_encoder, Tensor(scene.X, dtype=dtype))
        F_i_pts, valid = gather_image_features(F_img, proj, "bilinear")

    if ablation == "no_svfe":
        F_es, F_el, F_ei = F_s, F_l, F_i_pts
    elif ablation == "no_image":
        F_es = enhance_semantic(model.svfe, F_s, F_l, None)
        F_el, F_ei = enhance_points(model.svfe, F_l, F_s), None
    else:
        F_es, F_el, F_ei = apply_svfe(model.svfe, F_s, F_l, F_i_pts, valid)

    p = model.sgvf
    if ablation == "no_image":
        fusion = point_only_fusion(p, F_el)
    elif ablation == "no_sgvf":
        fusion = concat_baseline(p, F_el, F_ei)
    elif ablation == "sgvf_cross_attn":
        fusion = cross_attention_variant(p, F_el, F_ei)
    elif ablation == "sgvf_plus_self_attn":
        fusion = sgvf_plus_self_attention_variant(p, F_es, F_el, F_ei, valid)
    else:
        fusion = sgvf_forward(p, F_es, F_el, F_ei, valid)
    return ForwardResult(fusion, F_es, F_s, F_l, F_el, F_i_pts, F_ei, valid)


def scene_loss(model: ModelState, scene: Scene, vocab: ClassVocabulary, ablation: str, tau: float):
    out = forward_scene(model, scene, vocab.embeddings, ablation)
    S = similarity_matrix(out.fusion, out.F_es, model.similarity)
    ls = loss_seen(S, scene.train_labels, tau)
    lu = loss_unseen(S, scene.train_labels, vocab.seen, tau)
    return loss_total(ls, lu), ls, lu


def predict_scene(model: ModelState, scene: Scene, vocab: ClassVocabulary, ablation: str) -> np.ndarray:
    out = forward_scene(model, scene, vocab.embeddings, ablation)
    return predict(similarity_matrix(out.fusion, out.F_es, model.similarity))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lrs: dict[str, float], state: AdamState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.  Missing gradients count as zero."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype)
    return state


def learning_rates(model: ModelState, config: TrainConfig) -> dict[str, float]:
    groups = model.parameter_groups()
    lrs = {name: config.lr_backbone for name, _ in groups[BACKBONE_GROUP]}
    lrs.update({name: config.lr_svfe_sgvf for name, _ in groups[FUSION_GROUP]})
    return lrs


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: ModelState, adam: AdamState, config: TrainConfig,
                    meta: dict | None = None) -> None:
    info = {
        "config": asdict(config),
        "config_hash": config.hash(),
        "step": adam.step,
        "rng": {"kind": "per-epoch", "seed": config.seed},
        **(meta or {}),
    }
    sections = [("meta", np.frombuffer(json.dumps(info, sort_keys=True).encode(), dtype=np.uint8))]
    for name, t in model.named_parameters():
        sections.append((f"param/{name}", t.data.astype(np.float64)))
        if name in adam.m:
            sections.append((f"adam_m/{name}", adam.m[name].astype(np.float64)))
            sections.append((f"adam_v/{name}", adam.v[name].astype(np.float64)))
    binfmt.write_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, sections)


def load_checkpoint(path: str | Path) -> tuple[ModelState, AdamState, TrainConfig, dict]:
    version, sec = binfmt.read_file(path, CHECKPOINT_MAGIC)
    if version != CHECKPOINT_VERSION:
        raise binfmt.FormatError(f"unsupported checkpoint version {version}", len(CHECKPOINT_MAGIC))
    info = json.loads(sec["meta"].tobytes().decode())
    config = TrainConfig(**info["config"])
    dims = info["dims"]
    model = init_model(dims["attr_channels"], dims["image_channels"], dims["embed_dim"], config.ablation,
                       config.seed, config.dim, config.heads, config.td_hidden, config.svfe_order, config.dtype,
                       config.similarity)
    adam = AdamState(step=info["step"])
    for name, t in model.named_parameters():
        t.data[...] = sec[f"param/{name}"].astype(t.data.dtype)
        if f"adam_m/{name}" in sec:
            adam.m[name] = sec[f"adam_m/{name}"].astype(t.data.dtype)
            adam.v[name] = sec[f"adam_v/{name}"].astype(t.data.dtype)
    return model, adam, config, info


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [json.dumps(e, sort_keys=True) for e in self.epochs]


def _dims(vocab: ClassVocabulary, scene: Scene) -> dict:
    return {"attr_channels": int(scene.attrs.shape[1]), "image_channels": int(scene.X.shape[2]),
            "embed_dim": int(vocab.embed_dim)}


def train(config: TrainConfig, scenes: Sequence[Scene], vocab: ClassVocabulary, model: ModelState | None = None,
          adam: AdamState | None = None, checkpoint_dir: str | Path | None = None,
          progress: Callable[[int, float], None] | None = None,
          checkpoint_meta: dict | None = None) -> tuple[ModelState, TrainLog]:
    """Minimize L_s + L_u with Adam.  Only ``train_labels`` are read; ground truth stays sealed.

    Passing ``model`` and ``adam`` from a checkpoint continues that run exactly.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("training needs at least one scene")
    if model is None:
        model = init_model_for(config, vocab, scenes[0])
    adam = adam or AdamState()
    params = dict(model.named_parameters())
    lrs = learning_rates(model, config)
    steps_per_epoch = math.ceil(len(scenes) / config.batch_size)
    total = config.epochs * steps_per_epoch
    if config.max_steps:
        total = min(total, config.max_steps)
    log = TrainLog()
    initial = None
    meta = {"dims": _dims(vocab, scenes[0]), **(checkpoint_meta or {})}
    epoch_stats: dict[int, list[tuple[float, float, float]]] = {}

    with ground_truth_sealed():
        while adam.step < total:
            epoch, pos = divmod(adam.step, steps_per_epoch)
            order = np.random.default_rng([config.seed, epoch]).permutation(len(scenes))
            batch = order[pos * config.batch_size:(pos + 1) * config.batch_size]
            grads: dict[str, np.ndarray] = {}
            sums = np.zeros(3)
            for i in batch:
                L, ls, lu = scene_loss(model, scenes[i], vocab, config.ablation, config.tau)
                g = backward(L)
                for name, t in params.items():
                    gi = g.get(t)
                    if gi is not None:
                        gi = gi / len(batch)
                        grads[name] = gi if name not in grads else grads[name] + gi
                sums += (L.item(), ls.item(), lu.item())
            sums /= len(batch)
            if initial is None:
                initial = sums[0]
            if sums[0] > 10.0 * abs(initial) and abs(initial) > 0:
                raise DivergenceError(
                    f"loss {sums[0]:.4g} at step {adam.step} exceeds 10x the initial {initial:.4g}"
                    f" (L_s={sums[1]:.4g}, L_u={sums[2]:.4g}, lr={config.lr_backbone}/{config.lr_svfe_sgvf})")
            adam_step(params, grads, lrs, adam)
            log.steps.append(float(sums[0]))
            epoch_stats.setdefault(epoch, []).append(tuple(sums))
            if progress:
                progress(adam.step, float(sums[0]))
            if checkpoint_dir and config.checkpoint_every and adam.step % config.checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(checkpoint_dir) / f"step_{adam.step:06d}.ckpt", model, adam, config, meta)
            done_epoch = adam.step % steps_per_epoch == 0 or adam.step == total
            if done_epoch:
                vals = np.mean(epoch_stats.pop(epoch), axis=0)
                log.epochs.append({"epoch": epoch, "step": adam.step, "L": float(vals[0]),
                                   "L_s": float(vals[1]), "L_u": float(vals[2])})
    model._adam = adam  # retained so callers can checkpoint the final state
    return model, log


def evaluate(model: ModelState, scenes: Sequence[Scene], vocab: ClassVocabulary, ablation: str = "full",
             seed: int = 0, config_hash: str = "",
             predictor: Callable[[Scene], np.ndarray] | None = None) -> EvalReport:
    scenes = list(scenes)
    if not scenes:
        raise ValueError("evaluation needs at least one scene")
    cm = ConfusionMatrix(vocab.num_classes)
    for scene in scenes:
        pred = predictor(scene) if predictor else predict_scene(model, scene, vocab, ablation)
        cm.accumulate(scene.labels, pred)
    return EvalReport.from_confusion(cm, vocab.names, vocab.seen, seed, config_hash)
