"""Confusion matrices, IoU / mIoU and the harmonic seen-unseen IoU."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .alignment import UNLABELED

logger = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


class ConfusionMatrix:
    """Counts with ground truth on rows and predictions on columns."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise ValueError("confusion counts must be a non-negative CxC matrix")
        self.counts = counts

    def accumulate(self, gt, pred) -> ConfusionMatrix:
        gt = np.asarray(gt, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if gt.shape != pred.shape:
            raise ValueError(f"length mismatch: {gt.size} labels vs {pred.size} predictions")
        keep = gt != UNLABELED
        gt, pred = gt[keep], pred[keep]
        c = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= c or pred.min() < 0 or pred.max() >= c):
            raise ValueError("label out of range")
        self.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the denominator is zero."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def miou(cm: ConfusionMatrix, classes=None) -> float:
    """Mean IoU in percent over ``classes`` (all by default), skipping undefined classes."""
    iou = iou_per_class(cm)
    sel = iou if classes is None else iou[np.asarray(classes, dtype=np.int64)]
    sel = sel[~np.isnan(sel)]
    if sel.size == 0:
        raise UndefinedMetricError("mIoU undefined: no class in the subset appears in gt or predictions")
    return float(sel.mean() * 100.0)


def hiou(miou_seen: float, miou_unseen: float) -> float:
    """Harmonic mean of seen and unseen mIoU (percent)."""
    if miou_seen < 0 or miou_unseen < 0:
        raise ValueError("mIoU values must be non-negative")
    total = miou_seen + miou_unseen
    if total == 0:
        logger.warning("hIoU of two zero mIoUs is reported as 0")
        return 0.0
    return 2.0 * miou_seen * miou_unseen / total


def round_half_up(x: float, digits: int = 1) -> str:
    return str(Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    class_names: list[str]
    seen: np.ndarray
    confusion: np.ndarray
    miou_seen: float
    miou_unseen: float
    miou_overall: float
    hiou: float
    seed: int = 0
    config_hash: str = ""
    extra: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, class_names, seen, seed: int = 0,
                       config_hash: str = "") -> EvalReport:
        seen = np.asarray(seen, dtype=bool)
        s = miou(cm, np.flatnonzero(seen))
        u = miou(cm, np.flatnonzero(~seen))
        return cls(list(class_names), seen, cm.counts.copy(), s, u, miou(cm), hiou(s, u), seed, config_hash)

    @property
    def iou(self) -> np.ndarray:
        return iou_per_class(ConfusionMatrix(len(self.class_names), self.confusion))

    def to_text(self) -> str:
        lines = [
            "# zero-shot segmentation evaluation report",
            f"seed = {self.seed}",
            f"config_hash = {self.config_hash}",
            f"miou_seen = {self.miou_seen!r}",
            f"miou_unseen = {self.miou_unseen!r}",
            f"miou_overall = {self.miou_overall!r}",
            f"hiou = {self.hiou!r}",
        ]
        lines += [f"{k} = {v}" for k, v in sorted(self.extra.items())]
        lines += [
            "",
            "# seen / unseen / overall mIoU, hIoU (percent)",
            "summary = " + " / ".join(round_half_up(v) for v in
                                      (self.miou_seen, self.miou_unseen, self.miou_overall, self.hiou)),
            "",
            "[classes]",
            "index,name,split,iou_percent",
        ]
        for i, (name, s, v) in enumerate(zip(self.class_names, self.seen, self.iou)):
            shown = "nan" if np.isnan(v) else round_half_up(v * 100.0)
            lines.append(f"{i},{name},{'seen' if s else 'unseen'},{shown}")
        lines += ["", "[confusion]"]
        lines += [" ".join(str(int(c)) for c in row) for row in self.confusion]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> EvalReport:
        kv: dict[str, str] = {}
        names, seen, rows = [], [], []
        section = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                continue
            if section is None:
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
            elif section == "classes":
                if line.startswith("index,"):
                    continue
                _, name, split, _ = line.split(",")
                names.append(name)
                seen.append(split == "seen")
            elif section == "confusion":
                rows.append([int(v) for v in line.split()])
        known = {"seed", "config_hash", "miou_seen", "miou_unseen", "miou_overall", "hiou", "summary"}
        return cls(
            names, np.array(seen, dtype=bool), np.array(rows, dtype=np.int64).reshape(len(names), len(names)),
            float(kv["miou_seen"]), float(kv["miou_unseen"]), float(kv["miou_overall"]), float(kv["hiou"]),
            int(kv["seed"]), kv.get("config_hash", ""), {k: v for k, v in kv.items() if k not in known},
        )
