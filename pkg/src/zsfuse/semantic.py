"""Class vocabulary, word-embedding files and the semantic projection head."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .tensor import DimensionError, Tensor

logger = logging.getLogger(__name__)

SEMANTIC_HIDDEN = 96
FEATURE_DIM = 128


class EmbeddingFormatError(ValueError):
    pass


class MissingClassError(KeyError):
    def __init__(self, missing: list[str]):
        super().__init__(f"no embedding for class(es): {', '.join(missing)}")
        self.missing = missing


def normalize_name(name: str) -> str:
    return "-".join(name.strip().lower().replace("_", " ").replace("-", " ").split())


@dataclass
class ClassVocabulary:
    """Ordered class names, their seen/unseen split, and one embedding row per class."""

    names: list[str]
    seen: np.ndarray
    embeddings: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.names = list(self.names)
        self.seen = np.asarray(self.seen, dtype=bool)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        c = len(self.names)
        if c == 0:
            raise ValueError("vocabulary is empty")
        if len({normalize_name(n) for n in self.names}) != c:
            raise ValueError("duplicate class names")
        if self.seen.shape != (c,):
            raise ValueError(f"seen mask has shape {self.seen.shape}, expected ({c},)")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != c:
            raise ValueError(f"embeddings shape {self.embeddings.shape} does not match {c} classes")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite values")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def seen_idx(self) -> np.ndarray:
        return np.flatnonzero(self.seen)

    @property
    def unseen_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.seen)

    def permuted(self, order) -> ClassVocabulary:
        order = np.asarray(order)
        return ClassVocabulary([self.names[i] for i in order], self.seen[order], self.embeddings[order])

    def save(self, directory: str | Path) -> None:
        """Write ``classes.txt`` (``name,seen|unseen`` lines) and ``embeddings.txt``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = [f"{n},{'seen' if s else 'unseen'}" for n, s in zip(self.names, self.seen)]
        (directory / "classes.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        save_embeddings(directory / "embeddings.txt", self.names, self.embeddings)

    @classmethod
    def load(cls, directory: str | Path) -> ClassVocabulary:
        directory = Path(directory)
        names, seen = read_class_list(directory / "classes.txt")
        return cls(names, seen, load_embeddings(directory / "embeddings.txt", names))


def read_class_list(path: str | Path) -> tuple[list[str], np.ndarray]:
    names, seen = [], []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        name, sep, split = line.rpartition(",")
        if not sep or split not in ("seen", "unseen"):
            raise EmbeddingFormatError(f"{path}:{lineno}: expected 'name,seen|unseen', got {raw!r}")
        names.append(name)
        seen.append(split == "seen")
    return names, np.array(seen, dtype=bool)


def save_embeddings(path: str | Path, names: list[str], embeddings: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, row in zip(names, np.asarray(embeddings, dtype=np.float64)):
            fh.write(normalize_name(name) + " " + " ".join(repr(float(v)) for v in row) + "\n")


def load_embeddings(path: str | Path, names: list[str]) -> np.ndarray:
    """Read the rows for ``names`` (in that order) from a whitespace-separated embedding file.

    Names are matched after lowercasing and treating hyphens, underscores and
    spaces alike.
    """
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts:
                continue
            try:
                row = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: {exc}") from None
            if dim is None:
                dim = row.size
            if row.size != dim or dim == 0:
                raise EmbeddingFormatError(f"{path}:{lineno}: expected {dim} values, found {row.size}")
            table[normalize_name(parts[0])] = row
    missing = [n for n in names if normalize_name(n) not in table]
    if missing:
        raise MissingClassError(missing)
    return np.stack([table[normalize_name(n)] for n in names])


def synth_embeddings(num_classes: int, dim: int = 600, seed: int = 0, latent_dim: int | None = None,
                     noise: float = 0.05, max_cosine: float = 0.8) -> np.ndarray:
    """Unit-norm pseudo word embeddings with a shared low-rank structure.

    Rows are lifted from unit latent vectors in ``latent_dim`` dimensions (so
    every class is a mixture of a few shared directions, as related words are)
    plus isotropic noise.  Latents are redrawn until the largest pairwise cosine
    of the rows is below ``max_cosine``.
    """
    if num_classes < 1 or dim < 1:
        raise ValueError("num_classes and dim must be positive")
    rng = np.random.default_rng(seed)
    r = latent_dim if latent_dim is not None else max(2, min(dim, (num_classes + 1) // 2))
    r = min(r, dim)
    lift = np.linalg.qr(rng.standard_normal((dim, r)))[0].T  # [r, dim], orthonormal rows
    for _ in range(1000):
        z = rng.standard_normal((num_classes, r))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        w = z @ lift + noise * rng.standard_normal((num_classes, dim)) / np.sqrt(dim)
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        cos = w @ w.T
        np.fill_diagonal(cos, -1.0)
        if num_classes == 1 or cos.max() < max_cosine:
            return w
    raise RuntimeError("could not draw sufficiently distinct embeddings")


@dataclass
class SemanticHead:
    """G: word embedding -> 96 -> 128 shared feature space."""

    mlp: nn.MlpParams

    @property
    def in_dim(self) -> int:
        return self.mlp.layers[0].d_in


def init_semantic_head(rng: np.random.Generator, embed_dim: int, hidden: int = SEMANTIC_HIDDEN,
                       out: int = FEATURE_DIM, dtype=np.float64) -> SemanticHead:
    return SemanticHead(nn.init_mlp(rng, [embed_dim, hidden, out], dtype))


def semantic_forward(head: SemanticHead, W: Tensor) -> Tensor:
    if W.ndim != 2 or W.shape[1] != head.in_dim:
        raise DimensionError(f"semantic head expects [C, {head.in_dim}] embeddings, got {W.shape}")
    return nn.mlp(head.mlp, W)
