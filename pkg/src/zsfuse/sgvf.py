"""Semantic-guided visual feature fusion and its baselines.

Gates are read out of the semantic memory with the visual features as
queries, so they are indexed by point and can multiply the visual features
channel by channel.  A per-point, per-channel softmax over the two modalities
then decides how much of each enhanced feature reaches the fusion MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import DimensionError, Tensor

VARIANTS = ("sgvf", "concat_baseline", "cross_attention_only", "sgvf_plus_self_attention")
MASK_PENALTY = 1e4


@dataclass
class SgvfParams:
    gate_mha_3d: nn.MhaParams | None
    gate_mha_2d: nn.MhaParams | None
    fuse_mlp: nn.MlpParams  # 2d -> d -> d
    variant: str = "sgvf"
    cross_mha: nn.MhaParams | None = None
    self_block: nn.TdParams | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SGVF variant {self.variant!r}; expected one of {VARIANTS}")


def init_sgvf(rng: np.random.Generator, dim: int = 128, heads: int = 4, variant: str = "sgvf",
              td_hidden: int | None = None, dtype=np.float64) -> SgvfParams:
    gated = variant in ("sgvf", "sgvf_plus_self_attention")
    return SgvfParams(
        gate_mha_3d=nn.init_mha(rng, dim, heads, dtype) if gated else None,
        gate_mha_2d=nn.init_mha(rng, dim, heads, dtype) if gated else None,
        fuse_mlp=nn.init_mlp(rng, [2 * dim, dim, dim], dtype),
        variant=variant,
        cross_mha=nn.init_mha(rng, dim, heads, dtype) if variant == "cross_attention_only" else None,
        self_block=nn.init_td(rng, dim, heads, td_hidden, dtype) if variant == "sgvf_plus_self_attention" else None,
    )


def compute_gates(p: SgvfParams, F_es: Tensor, F_el: Tensor, F_ei: Tensor) -> tuple[Tensor, Tensor]:
    """w_3D = MHA(q=F_el, kv=F_es), w_2D = MHA(q=F_ei, kv=F_es); both [T, d]."""
    if F_es.shape[0] == 0:
        raise DimensionError("SGVF: no semantic features to attend to")
    if p.gate_mha_3d is None or p.gate_mha_2d is None:
        raise ValueError(f"variant {p.variant!r} has no gate attention")
    w3, _ = nn.mha(p.gate_mha_3d, F_el, F_es, F_es)
    w2, _ = nn.mha(p.gate_mha_2d, F_ei, F_es, F_es)
    return w3, w2


def modality_weights(w_3d: Tensor, w_2d: Tensor, F_el: Tensor, F_ei: Tensor,
                     valid: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Softmax over the stacked modality scores (w_3D * F_el, w_2D * F_ei).

    Image scores of points without a valid projection are lowered by a large
    constant before the softmax, which sends their whole weight to the 3D branch.
    """
    for name, x in (("w_3D", w_3d), ("w_2D", w_2d), ("F_ei", F_ei)):
        if x.shape != F_el.shape:
            raise DimensionError(f"SGVF: {name} shape {x.shape} != F_el shape {F_el.shape}")
    m3 = T.mul(w_3d, F_el)
    m2 = T.mul(w_2d, F_ei)
    if valid is not None and not np.all(valid):
        penalty = np.where(np.asarray(valid, bool)[:, None], 0.0, -MASK_PENALTY)
        m2 = T.add(m2, Tensor(np.broadcast_to(penalty, m2.shape), dtype=m2.dtype))
    A = T.softmax(T.stack([m3, m2], axis=0), axis=0)
    return T.index_select(A, [0], axis=0), T.index_select(A, [1], axis=0)


def fuse(p: SgvfParams, w_3d: Tensor, w_2d: Tensor, F_el: Tensor, F_ei: Tensor,
         valid: np.ndarray | None = None) -> Tensor:
    """F_fusion = MLP(concat(A_3 * F_el, A_2 * F_ei)) with (A_3, A_2) from :func:`modality_weights`."""
    a3, a2 = modality_weights(w_3d, w_2d, F_el, F_ei, valid)
    n, d = F_el.shape
    a3 = T.reshape(a3, (n, d))
    a2 = T.reshape(a2, (n, d))
    return nn.mlp(p.fuse_mlp, T.concat([T.mul(a3, F_el), T.mul(a2, F_ei)], axis=1))


def sgvf_forward(p: SgvfParams, F_es: Tensor, F_el: Tensor, F_ei: Tensor,
                 valid: np.ndarray | None = None) -> Tensor:
    w3, w2 = compute_gates(p, F_es, F_el, F_ei)
    return fuse(p, w3, w2, F_el, F_ei, valid)


def concat_baseline(p: SgvfParams, F_el: Tensor, F_ei: Tensor) -> Tensor:
    if F_el.shape != F_ei.shape:
        raise DimensionError(f"concat fusion: {F_el.shape} vs {F_ei.shape}")
    return nn.mlp(p.fuse_mlp, T.concat([F_el, F_ei], axis=1))


def cross_attention_variant(p: SgvfParams, F_el: Tensor, F_ei: Tensor) -> Tensor:
    """LiDAR features query image features; semantics are not consulted."""
    if p.cross_mha is None:
        raise ValueError("SGVF parameters were built without the cross-attention block")
    attended, _ = nn.mha(p.cross_mha, F_el, F_ei, F_ei)
    return nn.mlp(p.fuse_mlp, T.concat([T.add(F_el, attended), F_ei], axis=1))


def sgvf_plus_self_attention_variant(p: SgvfParams, F_es: Tensor, F_el: Tensor, F_ei: Tensor,
                                     valid: np.ndarray | None = None) -> Tensor:
    if p.self_block is None:
        raise ValueError("SGVF parameters were built without the self-attention block")
    return nn.self_attention_block(p.self_block, sgvf_forward(p, F_es, F_el, F_ei, valid))


def point_only_fusion(p: SgvfParams, F_el: Tensor) -> Tensor:
    """Fusion MLP with the image half of its input held at zero (a 128 -> 128 -> 128 MLP on F_el)."""
    zeros = Tensor(np.zeros(F_el.shape, dtype=F_el.dtype))
    return nn.mlp(p.fuse_mlp, T.concat([F_el, zeros], axis=1))


def apply_sgvf(p: SgvfParams, F_es: Tensor, F_el: Tensor, F_ei: Tensor | None,
               valid: np.ndarray | None = None) -> Tensor:
    if F_ei is None:
        return point_only_fusion(p, F_el)
    if p.variant == "sgvf":
        return sgvf_forward(p, F_es, F_el, F_ei, valid)
    if p.variant == "concat_baseline":
        return concat_baseline(p, F_el, F_ei)
    if p.variant == "cross_attention_only":
        return cross_attention_variant(p, F_el, F_ei)
    return sgvf_plus_self_attention_variant(p, F_es, F_el, F_ei, valid)
