"""Accuracy, rationale AUC, Jensen-Shannon distances and mean-shift counting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.stats import rankdata

from .graph import Graph


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.size == 0 or predictions.shape != labels.shape:
        raise ValueError("accuracy needs two non-empty sequences of equal length")
    return float(np.mean(predictions == labels))


def roc_auc(scores, flags) -> float:
    """ROC-AUC via the rank-sum identity; tied scores share their midrank."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    flags = np.asarray(flags, dtype=bool).reshape(-1)
    n_pos = int(flags.sum())
    n_neg = len(flags) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = rankdata(scores)
    return float((ranks[flags].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def rationale_auc(edge_scores: Sequence, gt_flags: Sequence, average: str = "micro") -> float:
    """Edge-level AUC of mask scores against ground-truth rationale flags.

    ``micro`` pools every edge of every graph; ``macro`` averages per-graph
    AUCs over graphs that contain both classes.
    """
    if average == "micro":
        return roc_auc(np.concatenate([np.ravel(s) for s in edge_scores]), np.concatenate([np.ravel(f) for f in gt_flags]))
    if average != "macro":
        raise ValueError(f"unknown average {average!r}")
    vals = []
    for s, f in zip(edge_scores, gt_flags):
        f = np.asarray(f, dtype=bool)
        if 0 < f.sum() < len(f):
            vals.append(roc_auc(s, f))
    if not vals:
        raise ValueError("no graph has both rationale and non-rationale edges")
    return float(np.mean(vals))


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats (0 <= JS <= ln 2)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must share a support")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("negative probability mass")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("distributions must sum to 1")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def structural_descriptor(g: Graph) -> np.ndarray:
    """Node count, edge count, fraction of nodes with degree 0..5, mean feature per dim."""
    deg = g.degrees()
    hist = np.bincount(np.minimum(deg, 6), minlength=7)[:6] / g.node_count
    return np.concatenate([[g.node_count, g.num_edges], hist, g.x.mean(axis=0)])


def histogram_distance(a: np.ndarray, b: np.ndarray, bins: int = 10) -> float:
    """Mean per-column JS between equal-width histograms over the pooled range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both corpora must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("descriptor dimensions differ")
    out = []
    for d in range(a.shape[1]):
        lo = min(a[:, d].min(), b[:, d].min())
        hi = max(a[:, d].max(), b[:, d].max())
        if hi <= lo:
            out.append(0.0)
            continue
        edges = np.linspace(lo, hi, bins + 1)
        pa, _ = np.histogram(a[:, d], bins=edges)
        pb, _ = np.histogram(b[:, d], bins=edges)
        out.append(js_divergence(pa / pa.sum(), pb / pb.sum()))
    return float(np.mean(out))


def distribution_distance(corpus_a: Sequence[Graph], corpus_b: Sequence[Graph], bins: int = 10) -> float:
    """JS distance between two graph corpora over structural descriptors."""
    if not corpus_a or not corpus_b:
        raise ValueError("both corpora must be non-empty")
    da = np.stack([structural_descriptor(g) for g in corpus_a])
    db = np.stack([structural_descriptor(g) for g in corpus_b])
    return histogram_distance(da, db, bins)


def auto_bandwidth(x: np.ndarray, quantile: float = 0.3, max_points: int = 500, seed: int = 0) -> float:
    x = np.asarray(x, dtype=np.float64)
    if len(x) > max_points:
        idx = np.sort(np.random.default_rng(seed).choice(len(x), size=max_points, replace=False))
        x = x[idx]
    if len(x) < 2:
        return 1.0
    d = pdist(x)
    bw = float(np.quantile(d, quantile))
    if bw <= 0:
        positive = d[d > 0]
        bw = float(positive.min()) if positive.size else 1.0
    return bw


def mean_shift_count(
    embeddings,
    bandwidth: float | str = "auto",
    tol: float = 1e-4,
    max_iter: int = 300,
) -> tuple[int, np.ndarray, float]:
    """Flat-kernel mean shift; returns ``(count, assignments, bandwidth)``.

    Every point climbs to its mode by averaging the data points within
    ``bandwidth``; modes closer than ``bandwidth / 2`` are merged.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0 or x.shape[1] == 0:
        raise ValueError("mean shift needs at least one point with one dimension")
    bw = auto_bandwidth(x) if bandwidth == "auto" else float(bandwidth)
    if not bw > 0:
        raise ValueError("bandwidth must be positive")
    modes = x.copy()
    active = np.ones(len(x), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        cur = modes[active]
        within = cdist(cur, x) <= bw
        new = (within @ x) / within.sum(axis=1, keepdims=True)
        shift = np.linalg.norm(new - cur, axis=1)
        modes[active] = new
        still = shift >= tol
        idx = np.flatnonzero(active)
        active[idx[~still]] = False

    centers: list[np.ndarray] = []
    assign = np.empty(len(x), dtype=np.int64)
    for k, m in enumerate(modes):
        for c, center in enumerate(centers):
            if np.linalg.norm(m - center) < bw / 2.0:
                assign[k] = c
                break
        else:
            centers.append(m)
            assign[k] = len(centers) - 1
    return len(centers), assign, bw


@dataclass
class EvalReport:
    accuracy: float
    rationale_auc: float | None = None
    per_class_accuracy: dict = field(default_factory=dict)
    js_distance: float | None = None
    env_category_count: int | None = None
    cluster_assignments: list | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None and k != "extra"}
        d.update(self.extra)
        return d
