"""Small stand-in encoders for the LiDAR and camera branches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .semantic import FEATURE_DIM
from .tensor import DimensionError, Tensor


@dataclass
class PointEncoder:
    mlp: nn.MlpParams  # (3 + k) -> 64 -> 128 -> 128

    @property
    def attr_channels(self) -> int:
        return self.mlp.layers[0].d_in - 3


@dataclass
class ImageEncoder:
    mlp: nn.MlpParams  # 2 c_img -> 96 -> 128

    @property
    def channels(self) -> int:
        return self.mlp.layers[0].d_in // 2


def init_point_encoder(rng: np.random.Generator, attr_channels: int, dim: int = FEATURE_DIM,
                       dtype=np.float64) -> PointEncoder:
    return PointEncoder(nn.init_mlp(rng, [3 + attr_channels, 64, dim, dim], dtype))


def init_image_encoder(rng: np.random.Generator, channels: int, dim: int = FEATURE_DIM,
                       dtype=np.float64) -> ImageEncoder:
    return ImageEncoder(nn.init_mlp(rng, [2 * channels, 96, dim], dtype))


def normalize_coordinates(P: np.ndarray) -> np.ndarray:
    """Center on the scene mean and scale so the farthest point has radius 1."""
    P = np.asarray(P, dtype=np.float64)
    c = P - P.mean(axis=0)
    r = np.sqrt((c * c).sum(axis=1)).max() if len(c) else 0.0
    return c / r if r > 0 else c


def encode_points(enc: PointEncoder, P, attrs: Tensor) -> Tensor:
    P = np.asarray(P.data if isinstance(P, Tensor) else P)
    if P.ndim != 2 or P.shape[1] != 3 or attrs.ndim != 2 or attrs.shape[0] != P.shape[0]:
        raise DimensionError(f"points {P.shape} and attributes {attrs.shape} do not pair up")
    if attrs.shape[1] != enc.attr_channels:
        raise DimensionError(f"encoder expects {enc.attr_channels} attribute channels, got {attrs.shape[1]}")
    coords = Tensor(normalize_coordinates(P), dtype=attrs.dtype)
    return nn.mlp(enc.mlp, T.concat([coords, attrs], axis=1))


def _reflect_index(n: int) -> np.ndarray:
    return np.pad(np.arange(n), 1, mode="reflect") if n > 1 else np.zeros(n + 2, dtype=np.int64)


def box_filter3x3(X: Tensor) -> Tensor:
    """3x3 mean filter over the two leading axes with reflect padding."""
    H, W = X.shape[:2]
    ri, ci = _reflect_index(H), _reflect_index(W)

    def forward(x):
        xp = x[ri][:, ci]
        out = np.zeros_like(x)
        for dr in range(3):
            for dc in range(3):
                out += xp[dr:dr + H, dc:dc + W]
        return out / 9.0

    def adjoint(g):
        gp = np.zeros((H + 2, W + 2) + g.shape[2:], dtype=g.dtype)
        for dr in range(3):
            for dc in range(3):
                gp[dr:dr + H, dc:dc + W] += g
        gp /= 9.0
        rows = np.zeros((H,) + gp.shape[1:], dtype=g.dtype)
        np.add.at(rows, ri, gp)
        out = np.zeros((H, W) + g.shape[2:], dtype=g.dtype)
        np.add.at(out, (slice(None), ci), rows)
        return out

    return T.apply_linear_map(X, forward, adjoint, op="box_filter")


def encode_image(enc: ImageEncoder, X: Tensor) -> Tensor:
    """Per-pixel MLP over the raw channels concatenated with their 3x3 box-filtered copy."""
    if X.ndim != 3 or X.shape[2] != enc.channels:
        raise DimensionError(f"encoder expects [H, W, {enc.channels}] images, got {X.shape}")
    H, W, c = X.shape
    stacked = T.concat([X, box_filter3x3(X)], axis=2)
    out = nn.mlp(enc.mlp, T.reshape(stacked, (H * W, 2 * c)))
    return T.reshape(out, (H, W, out.shape[1]))
