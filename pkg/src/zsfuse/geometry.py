"""Pinhole projection of LiDAR points and per-point sampling of image feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray  # 3x3, zero skew
    extrinsics: np.ndarray  # 4x4, LiDAR -> camera
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        E = np.asarray(self.extrinsics, dtype=np.float64)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", E)
        if K.shape != (3, 3) or E.shape != (4, 4):
            raise ValueError(f"bad calibration shapes {K.shape}, {E.shape}")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if K[0, 1] != 0 or np.any(K[2] != (0, 0, 1)) or K[1, 0] != 0:
            raise ValueError("intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]]")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (0 <= K[0, 2] < self.width and 0 <= K[1, 2] < self.height):
            raise ValueError("principal point lies outside the image")
        R = E[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or np.any(E[3] != (0, 0, 0, 1)):
            raise ValueError("extrinsics must be a rigid transform")

    @classmethod
    def from_params(cls, fx: float, fy: float, cx: float, cy: float, width: int, height: int,
                    extrinsics: np.ndarray | None = None) -> CameraModel:
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(4) if extrinsics is None else extrinsics, width, height)

    def with_extrinsics(self, extrinsics: np.ndarray) -> CameraModel:
        return CameraModel(self.intrinsics, extrinsics, self.width, self.height)


@dataclass
class ProjectionResult:
    pixel: np.ndarray  # [T, 2] (u, v)
    depth: np.ndarray  # [T]
    valid: np.ndarray  # [T] bool


def rigid_transform(points: np.ndarray, M: np.ndarray) -> np.ndarray:
    return points @ M[:3, :3].T + M[:3, 3]


def project_points(points, cam: CameraModel) -> ProjectionResult:
    """u = fx x/z + cx, v = fy y/z + cy in the camera frame; pixel centers sit at integers."""
    P = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3:
        raise DimensionError(f"expected [T, 3] points, got {P.shape}")
    pc = rigid_transform(P, cam.extrinsics)
    z = pc[:, 2]
    K = cam.intrinsics
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u = K[0, 0] * pc[:, 0] / z + K[0, 2]
        v = K[1, 1] * pc[:, 1] / z + K[1, 2]
    front = z > 0
    valid = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    u = np.where(front, u, np.nan)
    v = np.where(front, v, np.nan)
    return ProjectionResult(np.stack([u, v], axis=1), z, valid)


def _sample_plan(proj: ProjectionResult, height: int, width: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Flat pixel indices [T, K] and blend weights [T, K]; invalid points get zero weight."""
    valid = proj.valid
    u = np.where(valid, proj.pixel[:, 0], 0.0)
    v = np.where(valid, proj.pixel[:, 1], 0.0)
    if mode == "nearest":
        col = np.clip(np.floor(u + 0.5), 0, width - 1).astype(np.int64)
        row = np.clip(np.floor(v + 0.5), 0, height - 1).astype(np.int64)
        return (row * width + col)[:, None], valid.astype(np.float64)[:, None]
    if mode != "bilinear":
        raise ValueError(f"unknown sampling mode {mode!r}")
    c0 = np.floor(u).astype(np.int64)
    r0 = np.floor(v).astype(np.int64)
    fu = u - c0
    fv = v - r0
    c1 = np.minimum(c0 + 1, width - 1)
    r1 = np.minimum(r0 + 1, height - 1)
    idx = np.stack([r0 * width + c0, r0 * width + c1, r1 * width + c0, r1 * width + c1], axis=1)
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    return idx, w * valid[:, None]


def gather_image_features(F_img: Tensor, proj: ProjectionResult, mode: str = "bilinear") -> tuple[Tensor, np.ndarray]:
    """Per-point features sampled from an [H, W, d] map at each projected pixel.

    Points that are not valid receive the zero vector.
    """
    if F_img.ndim != 3:
        raise DimensionError(f"expected an [H, W, d] feature map, got {F_img.shape}")
    H, W, d = F_img.shape
    idx, w = _sample_plan(proj, H, W, mode)
    flat = T.reshape(F_img, (H * W, d))
    return T.weighted_gather_rows(flat, idx, w), proj.valid.copy()
