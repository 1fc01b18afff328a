"""2D views of semantic and visual class features at three points in the network.

For each class, the semantic feature and the mean visual feature of its
points are pooled, projected to 2D by PCA, and written as a CSV table (plus
an optional SVG scatter).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .semantic import ClassVocabulary
from .synthscene import Scene
from .trainer import ModelState, forward_scene

STAGES = ("pre_svfe", "post_svfe", "post_sgvf")
COLUMNS = ("class", "kind", "split", "x", "y")


def pca_2d(X: np.ndarray) -> np.ndarray:
    """Project rows onto the top two principal axes (deterministic sign: largest |loading| positive)."""
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    vt = vt[:2]
    signs = np.sign(vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)])
    vt = vt * np.where(signs == 0, 1.0, signs)[:, None]
    Y = Xc @ vt.T
    if Y.shape[1] < 2:
        Y = np.hstack([Y, np.zeros((Y.shape[0], 2 - Y.shape[1]))])
    return Y


def stage_features(model: ModelState, scenes, vocab: ClassVocabulary, stage: str,
                   ablation: str = "full") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(semantic [C, d], per-class mean visual [C, d], present [C]) at ``stage``."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    C = vocab.num_classes
    sums, counts, sem = None, np.zeros(C), None
    for scene in scenes:
        out = forward_scene(model, scene, vocab.embeddings, ablation)
        if stage == "pre_svfe":
            s, v = out.F_s.data, out.F_l.data
        elif stage == "post_svfe":
            s, v = out.F_es.data, out.F_el.data
        else:
            s, v = out.F_es.data, out.fusion.data
        labels = scene.labels
        if sums is None:
            sums = np.zeros((C, v.shape[1]))
            sem = np.zeros((C, s.shape[1]))
        np.add.at(sums, labels, v)
        counts += np.bincount(labels, minlength=C)
        sem += s
    present = counts > 0
    visual = np.where(present[:, None], sums / np.maximum(counts, 1)[:, None], 0.0)
    return sem / len(scenes), visual, present


@dataclass
class PlotTable:
    stage: str
    rows: list[tuple[str, str, str, float, float]]
    config_hash: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# stage={self.stage} config_hash={self.config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for name, kind, split, x, y in self.rows:
            w.writerow([name, kind, split, repr(float(x)), repr(float(y))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> PlotTable:
        lines = text.splitlines()
        meta = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split())
        reader = csv.reader(lines[1:])
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected columns {header}")
        rows = [(r[0], r[1], r[2], float(r[3]), float(r[4])) for r in reader if r]
        return cls(meta.get("stage", ""), rows, meta.get("config_hash", ""))

    def pairs(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        sem = {r[0]: np.array(r[3:5]) for r in self.rows if r[1] == "semantic"}
        vis = {r[0]: np.array(r[3:5]) for r in self.rows if r[1] == "visual"}
        return {k: (sem[k], vis[k]) for k in sem if k in vis}

    def mean_distance(self) -> float:
        return float(np.mean([np.linalg.norm(a - b) for a, b in self.pairs().values()]))


def export_stage(model: ModelState, scenes, vocab: ClassVocabulary, stage: str, ablation: str = "full",
                 config_hash: str = "") -> PlotTable:
    """PCA of the pooled, unit-normalized class features, scaled to unit RMS radius.

    Normalizing first keeps the comparison about direction (what dot-product
    alignment rewards) and makes distances comparable across stages.
    """
    sem, vis, present = stage_features(model, scenes, vocab, stage, ablation)
    idx = np.flatnonzero(present)
    pooled = np.vstack([sem[idx], vis[idx]])
    pooled = pooled / np.maximum(np.linalg.norm(pooled, axis=1, keepdims=True), 1e-12)
    Y = pca_2d(pooled)
    rms = np.sqrt((Y ** 2).sum(axis=1).mean())
    if rms > 0:
        Y = Y / rms
    n = idx.size
    rows = []
    for j, c in enumerate(idx):
        split = "seen" if vocab.seen[c] else "unseen"
        rows.append((vocab.names[c], "semantic", split, Y[j, 0], Y[j, 1]))
        rows.append((vocab.names[c], "visual", split, Y[n + j, 0], Y[n + j, 1]))
    return PlotTable(stage, rows, config_hash)


def write_svg(table: PlotTable, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for name, (s, v) in table.pairs().items():
        unseen = any(r[0] == name and r[2] == "unseen" for r in table.rows)
        color = "tab:red" if unseen else "tab:blue"
        ax.plot([s[0], v[0]], [s[1], v[1]], color="0.7", lw=0.8, zorder=1)
        ax.scatter(*s, marker="*", s=90, color=color, zorder=2)
        ax.scatter(*v, marker="o", s=30, color=color, zorder=2)
        ax.annotate(name, s, fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_title(f"{table.stage} (star: semantic, dot: visual; red: unseen)", fontsize=9)
    ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
