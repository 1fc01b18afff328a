"""Semantic-visual feature enhancement: cross-attention exchange between class and visual features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import TdParams
from .tensor import DimensionError, Tensor

ORDERS = ("points_first", "image_first")
VARIANTS = ("cross_attention", "self_attention_only")


@dataclass
class SvfeParams:
    td_sem_from_points: TdParams
    td_sem_from_image: TdParams | None
    td_points_from_sem: TdParams
    td_image_from_sem: TdParams | None
    order: str = "points_first"
    variant: str = "cross_attention"

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"unknown SVFE order {self.order!r}; expected one of {ORDERS}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SVFE variant {self.variant!r}; expected one of {VARIANTS}")


def init_svfe(rng: np.random.Generator, dim: int = 128, heads: int = 4, hidden: int | None = None,
              with_image: bool = True, order: str = "points_first", variant: str = "cross_attention",
              dtype=np.float64) -> SvfeParams:
    def block():
        return nn.init_td(rng, dim, heads, hidden, dtype)

    return SvfeParams(
        td_sem_from_points=block(),
        td_sem_from_image=block() if with_image else None,
        td_points_from_sem=block(),
        td_image_from_sem=block() if with_image else None,
        order=order,
        variant=variant,
    )


def _memory(x: Tensor, valid: np.ndarray | None) -> np.ndarray | None:
    if x.shape[0] == 0:
        raise DimensionError("SVFE: empty visual memory (no points)")
    if valid is None or valid.all():
        return None
    return valid


def enhance_semantic(p: SvfeParams, F_s: Tensor, F_l: Tensor, F_i_pts: Tensor | None,
                     image_valid: np.ndarray | None = None) -> Tensor:
    """F_es = TD(TD(F_s, F_l, F_l), F_i, F_i), or image first when ``p.order == 'image_first'``.

    Image keys of points without a valid projection are masked out; when no
    point has one (or ``F_i_pts`` is None) the image step is skipped.
    """
    point_mask = _memory(F_l, None)

    def with_points(q):
        return nn.td(p.td_sem_from_points, q, F_l, F_l, point_mask)

    def with_image(q):
        if F_i_pts is None or p.td_sem_from_image is None:
            return q
        mask = _memory(F_i_pts, image_valid)
        if mask is not None and not mask.any():
            return q
        return nn.td(p.td_sem_from_image, q, F_i_pts, F_i_pts, mask)

    if p.order == "points_first":
        return with_image(with_points(F_s))
    return with_points(with_image(F_s))


def enhance_points(p: SvfeParams, F_l: Tensor, F_s: Tensor) -> Tensor:
    """F_el = TD(F_l, F_s, F_s): points query the (unenhanced) semantic features."""
    return nn.td(p.td_points_from_sem, F_l, F_s, F_s)


def enhance_image_points(p: SvfeParams, F_i_pts: Tensor, F_s: Tensor) -> Tensor:
    """F_ei = TD(F_i, F_s, F_s) on the per-point image features."""
    if p.td_image_from_sem is None:
        raise ValueError("SVFE parameters were built without the image branch")
    return nn.td(p.td_image_from_sem, F_i_pts, F_s, F_s)


def svfe_self_attention_variant(p: SvfeParams, F_s: Tensor, F_l: Tensor,
                                F_i_pts: Tensor | None) -> tuple[Tensor, Tensor, Tensor | None]:
    """Each stream attends only to itself, reusing the four blocks (same parameter count).

    The semantic stream passes through the two blocks that would otherwise
    read the visual features.
    """
    F_es = nn.self_attention_block(p.td_sem_from_points, F_s)
    if p.td_sem_from_image is not None:
        F_es = nn.self_attention_block(p.td_sem_from_image, F_es)
    F_el = nn.self_attention_block(p.td_points_from_sem, F_l)
    F_ei = None
    if F_i_pts is not None and p.td_image_from_sem is not None:
        F_ei = nn.self_attention_block(p.td_image_from_sem, F_i_pts)
    return F_es, F_el, F_ei


def apply_svfe(p: SvfeParams, F_s: Tensor, F_l: Tensor, F_i_pts: Tensor | None,
               image_valid: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor | None]:
    """Run the configured variant and return (F_es, F_el, F_ei)."""
    if p.variant == "self_attention_only":
        return svfe_self_attention_variant(p, F_s, F_l, F_i_pts)
    F_es = enhance_semantic(p, F_s, F_l, F_i_pts, image_valid)
    F_el = enhance_points(p, F_l, F_s)
    F_ei = enhance_image_points(p, F_i_pts, F_s) if F_i_pts is not None and p.td_image_from_sem is not None else None
    return F_es, F_el, F_ei
