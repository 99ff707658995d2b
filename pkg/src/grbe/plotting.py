"""Figures written next to the CSV/JSON reports (Agg backend, PNG only)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no Software/date chunks, so reruns are byte-identical
_META = {"Software": None}

LOSS_TERMS = ("L_r", "L_a", "L_c", "L_s", "total")


def _series(history: Sequence[dict], key: str) -> tuple[np.ndarray, np.ndarray]:
    ep = np.array([row["epoch"] for row in history], dtype=float)
    val = np.array([row.get(key, math.nan) for row in history], dtype=float)
    keep = np.isfinite(val)
    return ep[keep], val[keep]


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_history(history: Sequence[dict], out_dir: str | Path, prefix: str = "") -> list[Path]:
    """Loss curves, accuracy/AUC curves and the augmentation distance per epoch."""
    out_dir = Path(out_dir)
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in LOSS_TERMS:
        x, y = _series(history, key)
        if len(x):
            ax.plot(x, y, label=key, lw=1.5 if key == "total" else 1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    paths.append(_save(fig, out_dir / f"{prefix}losses.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("train_acc", "val_acc", "rationale_auc"):
        x, y = _series(history, key)
        if len(x):
            ax.plot(x, y, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    paths.append(_save(fig, out_dir / f"{prefix}accuracy.png"))

    x, y = _series(history, "aug_distance")
    if len(x):
        paths.append(plot_distance_series(x, y, out_dir / f"{prefix}aug_distance.png"))
    return paths


def plot_distance_series(epochs, distances, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, distances, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("JS distance (augmented vs. train)")
    return _save(fig, Path(path))


def _project(x: np.ndarray) -> np.ndarray:
    """First two principal components (zero-padded for 1-D data)."""
    x = x - x.mean(axis=0)
    if x.shape[1] >= 2 and len(x) >= 2:
        _, _, vt = np.linalg.svd(x, full_matrices=False)
        # fix the sign so the projection does not flip between runs
        signs = np.sign(vt[:2, np.argmax(np.abs(vt[:2]), axis=1)].diagonal())
        signs[signs == 0] = 1.0
        return x @ (vt[:2].T * signs)
    return np.column_stack([x[:, 0], np.zeros(len(x))])


def plot_clusters(groups: dict[str, tuple[np.ndarray, np.ndarray]], path: str | Path) -> Path:
    """Side-by-side scatter of embeddings coloured by mean-shift cluster.

    ``groups`` maps a panel title to ``(embeddings, assignments)``.
    """
    fig, axes = plt.subplots(1, len(groups), figsize=(5 * len(groups), 4), squeeze=False)
    for ax, (title, (emb, assign)) in zip(axes[0], groups.items()):
        emb = np.asarray(emb, dtype=float)
        xy = _project(emb if emb.ndim == 2 else emb[:, None])
        ax.scatter(xy[:, 0], xy[:, 1], c=assign, cmap="tab20", s=8)
        ax.set_title(f"{title}: {len(np.unique(assign))} clusters")
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, Path(path))


def plot_descriptor_histograms(a: np.ndarray, b: np.ndarray, names: Sequence[str], path: str | Path, labels=("a", "b"), bins: int = 10) -> Path:
    """Per-descriptor histograms of two corpora on shared bin edges."""
    cols = min(4, len(names))
    rows = math.ceil(len(names) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.4 * rows), squeeze=False)
    for d, name in enumerate(names):
        ax = axes[d // cols][d % cols]
        lo = min(a[:, d].min(), b[:, d].min())
        hi = max(a[:, d].max(), b[:, d].max())
        edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
        ax.hist(a[:, d], bins=edges, alpha=0.5, density=True, label=labels[0])
        ax.hist(b[:, d], bins=edges, alpha=0.5, density=True, label=labels[1])
        ax.set_title(name, fontsize=9)
    for d in range(len(names), rows * cols):
        axes[d // cols][d % cols].axis("off")
    axes[0][0].legend(frameon=False, fontsize=8)
    return _save(fig, Path(path))
