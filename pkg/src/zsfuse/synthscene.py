"""Deterministic synthetic LiDAR + camera scenes whose classes are tied to word embeddings.

Every class owns a prototype (depth, height, spread, attribute signature,
appearance colour) that is an affine function of its embedding row through a
fixed coupling matrix, so semantic similarity predicts visual similarity.
Classes listed in ``image_only_pairs`` copy the geometry and attributes of
their partner and differ only in appearance: they can be told apart only
through the image.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from collections.abc import Iterator
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import binfmt
from .alignment import UNLABELED
from .geometry import CameraModel, project_points
from .semantic import ClassVocabulary, synth_embeddings

SCENE_MAGIC = b"ZS3S"
SCENE_VERSION = 1

DEFAULT_CLASSES = ("road", "sidewalk", "building", "vegetation", "car", "person", "truck", "bicyclist")

# LiDAR frame: x forward, y left, z up.  Camera frame: x right, y down, z forward.
LIDAR_TO_CAMERA = np.array([
    [0.0, -1.0, 0.0, 0.0],
    [0.0, 0.0, -1.0, 0.3],
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
])


class SceneGenerationError(RuntimeError):
    pass


class LabelLeakError(RuntimeError):
    """Ground-truth labels were read while training was in progress."""


_guard = threading.local()


@contextlib.contextmanager
def ground_truth_sealed():
    """Within this block, reading ``Scene.labels`` raises :class:`LabelLeakError`."""
    prev = getattr(_guard, "sealed", False)
    _guard.sealed = True
    try:
        yield
    finally:
        _guard.sealed = prev


@dataclass(frozen=True)
class SceneSpec:
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    unseen: tuple[int, ...] = (6, 7)
    points_per_class: tuple[int, int] = (224, 288)
    attr_channels: int = 4
    image_height: int = 48
    image_width: int = 64
    image_channels: int = 3
    focal: float = 40.0
    embed_dim: int = 600
    geometry_noise: float = 0.15
    image_noise: float = 0.05
    image_only_pairs: tuple[tuple[int, int], ...] = ((6, 4), (7, 5))
    world_seed: int = 0
    azimuth_span_deg: float = 36.0
    splat_radius: int = 0
    pair_cosine: float = 0.75

    def __post_init__(self):
        c = len(self.class_names)
        if c < 1 or self.image_height < 1 or self.image_width < 1:
            raise ValueError("need at least one class and a non-empty image")
        lo, hi = self.points_per_class
        if not 1 <= lo <= hi:
            raise ValueError(f"bad points_per_class range {self.points_per_class}")
        for i in self.unseen:
            if not 0 <= i < c:
                raise ValueError(f"unseen class index {i} out of range")
        for a, b in self.image_only_pairs:
            if not (0 <= a < c and 0 <= b < c) or a == b:
                raise ValueError(f"bad image-only pair ({a}, {b})")
        if not -1.0 < self.pair_cosine < 0.95:
            raise ValueError("pair_cosine must lie in (-1, 0.95)")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def seen_mask(self) -> np.ndarray:
        mask = np.ones(self.num_classes, dtype=bool)
        mask[list(self.unseen)] = False
        return mask

    def vocabulary(self) -> ClassVocabulary:
        return ClassVocabulary(list(self.class_names), self.seen_mask, self.embeddings)

    @cached_property
    def embeddings(self) -> np.ndarray:
        """Synthetic embeddings; the first class of each image-only pair is pulled toward its partner.

        Related words have related vectors (truck near car), so the pair
        member gets cosine ``pair_cosine`` with its partner.
        """
        w = synth_embeddings(self.num_classes, self.embed_dim, self.world_seed)
        for a, b in self.image_only_pairs:
            u = w[a] - (w[a] @ w[b]) * w[b]
            norm = np.linalg.norm(u)
            if norm < 1e-12:
                continue
            c = self.pair_cosine
            w[a] = c * w[b] + np.sqrt(1.0 - c * c) * u / norm
        return w

    @property
    def prototype_dim(self) -> int:
        return 5 + self.attr_channels + self.image_channels

    @cached_property
    def coupling(self) -> np.ndarray:
        """[embed_dim, prototype_dim] map from embedding rows to raw prototype vectors."""
        rng = np.random.default_rng([self.world_seed, 1])
        return rng.standard_normal((self.embed_dim, self.prototype_dim))

    @cached_property
    def prototypes(self) -> dict[str, np.ndarray]:
        raw = self.embeddings @ self.coupling
        k = self.attr_channels
        protos = {
            "depth": 9.0 + 2.5 * np.tanh(raw[:, 0]),
            "height": -0.5 + 0.8 * np.tanh(raw[:, 1]),
            "spread": 0.25 + 0.35 / (1.0 + np.exp(-raw[:, 2:5])),
            "attrs": raw[:, 5:5 + k].copy(),
            "appearance": 1.0 / (1.0 + np.exp(-1.5 * raw[:, 5 + k:])),
        }
        for a, b in self.image_only_pairs:
            for key in ("depth", "height", "spread", "attrs"):
                protos[key][a] = protos[key][b]
        return protos

    def camera(self, focal: float | None = None) -> CameraModel:
        f = self.focal if focal is None else focal
        return CameraModel.from_params(f, f, (self.image_width - 1) / 2, (self.image_height - 1) / 2,
                                       self.image_width, self.image_height, LIDAR_TO_CAMERA)


@dataclass
class Scene:
    P: np.ndarray  # [T, 3]
    attrs: np.ndarray  # [T, k]
    X: np.ndarray  # [H, W, c]
    cam: CameraModel
    ground_truth: np.ndarray = field(repr=False)  # [T]
    train_labels: np.ndarray = field(repr=False)  # [T], UNLABELED on unseen classes

    @property
    def labels(self) -> np.ndarray:
        if getattr(_guard, "sealed", False):
            raise LabelLeakError("ground-truth labels accessed during training")
        return self.ground_truth

    @property
    def num_points(self) -> int:
        return self.P.shape[0]


def render_image(points: np.ndarray, colors: np.ndarray, cam: CameraModel, background: float = 0.5,
                 radius: int = 1) -> np.ndarray:
    """Paint each visible point's colour over a (2r+1)^2 pixel patch, nearest point on top."""
    H, W, c = cam.height, cam.width, colors.shape[1]
    image = np.full((H * W, c), background, dtype=np.float64)
    proj = project_points(points, cam)
    vis = np.flatnonzero(proj.valid)
    if vis.size == 0:
        return image.reshape(H, W, c)
    col = np.floor(proj.pixel[vis, 0] + 0.5).astype(np.int64)
    row = np.floor(proj.pixel[vis, 1] + 0.5).astype(np.int64)
    pix, owner, depth = [], [], []
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            r, q = row + dr, col + dc
            ok = (r >= 0) & (r < H) & (q >= 0) & (q < W)
            pix.append(r[ok] * W + q[ok])
            owner.append(vis[ok])
            depth.append(proj.depth[vis[ok]])
    pix, owner, depth = np.concatenate(pix), np.concatenate(owner), np.concatenate(depth)
    order = np.lexsort((owner, depth, pix))
    first = np.unique(pix[order], return_index=True)[1]
    winners = order[first]
    image[pix[winners]] = colors[owner[winners]]
    return image.reshape(H, W, c)


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    protos = spec.prototypes
    C = spec.num_classes
    lo, hi = spec.points_per_class
    counts = rng.integers(lo, hi + 1, size=C)
    slots = rng.permutation(C)
    span = np.deg2rad(spec.azimuth_span_deg)
    azimuth = np.linspace(-span, span, C)[slots] if C > 1 else np.zeros(1)
    azimuth = azimuth + rng.normal(0.0, 0.3 * span / max(C, 1), size=C)
    depth = protos["depth"] + rng.normal(0.0, 0.5, size=C)
    height = protos["height"] + rng.normal(0.0, 0.2, size=C)
    centers = np.stack([depth * np.cos(azimuth), depth * np.sin(azimuth), height], axis=1)

    labels = np.repeat(np.arange(C, dtype=np.int32), counts)
    P = centers[labels] + protos["spread"][labels] * rng.standard_normal((labels.size, 3))
    attrs = protos["attrs"][labels] + spec.geometry_noise * rng.standard_normal((labels.size, spec.attr_channels))

    focal = spec.focal
    for _ in range(8):
        cam = spec.camera(focal)
        if project_points(P, cam).valid.any():
            break
        focal *= 0.7
    else:
        raise SceneGenerationError("camera sees no points after 8 attempts")
    X = render_image(P, protos["appearance"][labels], cam, radius=spec.splat_radius)
    X = X + spec.image_noise * rng.standard_normal(X.shape)

    train_labels = labels.copy()
    train_labels[~spec.seen_mask[labels]] = UNLABELED
    return Scene(P, attrs, X, cam, labels, train_labels)


def dataset(spec: SceneSpec, n_scenes: int, seed: int) -> Iterator[Scene]:
    """Scene ``i`` is generated from seed ``seed XOR i``."""
    for i in range(n_scenes):
        yield generate_scene(spec, seed ^ i)


def _camera_vector(cam: CameraModel) -> np.ndarray:
    return np.concatenate([cam.intrinsics.reshape(-1), cam.extrinsics.reshape(-1), [cam.width, cam.height]])


def scene_to_bytes(scene: Scene) -> bytes:
    return binfmt.encode(SCENE_MAGIC, SCENE_VERSION, [
        ("POINTS", scene.P),
        ("ATTRS", scene.attrs),
        ("IMAGE", scene.X),
        ("CAM", _camera_vector(scene.cam)),
        ("LABELS", scene.ground_truth.astype(np.int32)),
        ("TRAINLBL", scene.train_labels.astype(np.int32)),
    ])


def scene_from_bytes(blob: bytes) -> Scene:
    version, sec = binfmt.decode(blob, SCENE_MAGIC)
    if version != SCENE_VERSION:
        raise binfmt.FormatError(f"unsupported scene format version {version}", len(SCENE_MAGIC))
    missing = {"POINTS", "ATTRS", "IMAGE", "CAM", "LABELS", "TRAINLBL"} - sec.keys()
    if missing:
        raise binfmt.FormatError(f"missing sections {sorted(missing)}", len(blob) - 4)
    cam_vec = sec["CAM"]
    cam = CameraModel(cam_vec[:9].reshape(3, 3), cam_vec[9:25].reshape(4, 4), int(cam_vec[25]), int(cam_vec[26]))
    return Scene(sec["POINTS"], sec["ATTRS"], sec["IMAGE"], cam, sec["LABELS"], sec["TRAINLBL"])


def save_scene(scene: Scene, path: str | Path) -> bytes:
    blob = scene_to_bytes(scene)
    Path(path).write_bytes(blob)
    return blob


def load_scene(path: str | Path) -> Scene:
    return scene_from_bytes(Path(path).read_bytes())


def scene_digest(scene: Scene) -> str:
    return hashlib.sha256(scene_to_bytes(scene)).hexdigest()
