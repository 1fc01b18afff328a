"""Dot-product alignment losses between point features and class features, and inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

logger = logging.getLogger(__name__)

UNLABELED = -1
SIMILARITIES = ("dot_product", "cosine")


class UndefinedLossError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentConfig:
    tau: float = 0.1
    similarity: str = "dot_product"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unsupported similarity {self.similarity!r}; expected one of {SIMILARITIES}")


def similarity_matrix(F: Tensor, E: Tensor, kind: str = "dot_product") -> Tensor:
    """S[t, c] = F[t] . E[c]; with ``kind="cosine"`` both sides are unit-normalized first."""
    if F.ndim != 2 or E.ndim != 2 or F.shape[1] != E.shape[1]:
        raise DimensionError(f"similarity: features {F.shape} vs class features {E.shape}")
    if kind == "cosine":
        F, E = T.l2_normalize(F, axis=1), T.l2_normalize(E, axis=1)
    elif kind != "dot_product":
        raise ValueError(f"unsupported similarity {kind!r}; expected one of {SIMILARITIES}")
    return T.matmul(F, T.transpose(E))


def loss_seen(S: Tensor, labels: np.ndarray, tau: float) -> Tensor:
    """Mean over labeled points of -log softmax(S / tau)[y] over all classes."""
    labels = np.asarray(labels)
    rows = np.flatnonzero(labels != UNLABELED)
    if rows.size == 0:
        raise UndefinedLossError("seen-class loss needs at least one labeled point")
    logp = T.log_softmax(T.scale(T.gather_rows(S, rows), 1.0 / tau), axis=1)
    onehot = np.zeros(logp.shape, dtype=logp.dtype)
    onehot[np.arange(rows.size), labels[rows]] = 1.0
    return T.scale(T.reduce_sum(T.mul(logp, Tensor(onehot, dtype=logp.dtype))), -1.0 / rows.size)


def loss_unseen(S: Tensor, labels: np.ndarray, seen_mask: np.ndarray, tau: float) -> Tensor:
    """Mean over unlabeled points of log(seen-class mass of softmax(S / tau)); always <= 0."""
    labels = np.asarray(labels)
    rows = np.flatnonzero(labels == UNLABELED)
    if rows.size == 0:
        logger.info("no unlabeled points; unseen-class loss contributes 0")
        return Tensor(0.0, dtype=S.dtype)
    z = T.scale(T.gather_rows(S, rows), 1.0 / tau)
    seen_cols = np.flatnonzero(np.asarray(seen_mask, bool))
    diff = T.sub(T.logsumexp(T.index_select(z, seen_cols, axis=1), axis=1), T.logsumexp(z, axis=1))
    return T.reduce_mean(diff)


def loss_total(ls, lu):
    return T.add(ls, lu) if isinstance(ls, Tensor) or isinstance(lu, Tensor) else ls + lu


def predict(S) -> np.ndarray:
    """Arg-max class per row (ties go to the lowest index)."""
    S = np.asarray(S.data if isinstance(S, Tensor) else S)
    if S.ndim != 2 or S.shape[1] < 1:
        raise DimensionError(f"predict expects [T, C] scores with C >= 1, got {S.shape}")
    return np.argmax(S, axis=1)
