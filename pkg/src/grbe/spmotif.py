"""Spurious-Motifs synthetic benchmark.

Each graph is a motif (cycle, house or crane; the motif index is the label)
attached by two random edges to a base (tree, ladder or wheel).  In the
training and validation splits the base matching the motif is chosen with
probability ``bias`` and each other base with ``(1 - bias) / 2``; in the test
split the base is uniform, which breaks the spurious correlation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .graph import Graph

MOTIFS = ("cycle", "house", "crane")
BASES = ("tree", "ladder", "wheel")
FEATURE_DIM = 4
ATTACHMENT_EDGES = 2
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def cycle(n: int = 5) -> list[tuple[int, int]]:
    return [(k, (k + 1) % n) for k in range(n)]


def house() -> list[tuple[int, int]]:
    #   4
    #  / \
    # 3---2
    # |   |
    # 0---1
    return [(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4)]


def crane() -> list[tuple[int, int]]:
    # square 0-1-2-3 with diagonal 0-2 and a pendant 4 hanging off 3
    return [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (3, 4)]


def tree(depth: int = 3) -> list[tuple[int, int]]:
    """Complete binary tree with ``depth`` levels below the root."""
    n = 2 ** (depth + 1) - 1
    return [((k - 1) // 2, k) for k in range(1, n)]


def ladder(length: int = 3) -> list[tuple[int, int]]:
    edges = [(2 * k, 2 * k + 1) for k in range(length)]
    for k in range(length - 1):
        edges += [(2 * k, 2 * k + 2), (2 * k + 1, 2 * k + 3)]
    return edges


def wheel(rim: int = 6) -> list[tuple[int, int]]:
    """Hub node 0 joined to every node of a ``rim``-cycle on nodes 1..rim."""
    spokes = [(0, k) for k in range(1, rim + 1)]
    ring = [(k, k % rim + 1) for k in range(1, rim + 1)]
    return spokes + ring


def node_count(edges: list[tuple[int, int]]) -> int:
    return 1 + max(max(e) for e in edges)


def motif_library() -> dict[str, list[tuple[int, int]]]:
    """Canonical edge lists of the three motifs and three bases."""
    return {
        "cycle": cycle(5),
        "house": house(),
        "crane": crane(),
        "tree": tree(3),
        "ladder": ladder(3),
        "wheel": wheel(6),
    }


@dataclass(frozen=True)
class SpmotifConfig:
    bias: float = 0.9
    n_train: int = 1500
    n_val: int = 500
    n_test: int = 500
    seed: int = 0
    base_scale: float = 1.0

    def __post_init__(self):
        if not (1.0 / 3.0 - 1e-12 <= self.bias <= 1.0):
            raise ValueError(f"bias must lie in [1/3, 1], got {self.bias}")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train + self.n_val + self.n_test == 0:
            raise ValueError("split sizes must be non-negative and not all zero")
        if self.base_scale <= 0:
            raise ValueError("base_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _base_edges(kind: int, rng: np.random.Generator, scale: float) -> list[tuple[int, int]]:
    if kind == 0:
        return tree(3)
    if kind == 1:
        lo, hi = max(2, round(5 * scale)), max(2, round(10 * scale))
        return ladder(int(rng.integers(lo, hi + 1)))
    lo, hi = max(3, round(9 * scale)), max(3, round(18 * scale))
    return wheel(int(rng.integers(lo, hi + 1)))


def _motif_edges(kind: int) -> list[tuple[int, int]]:
    return (cycle(5), house(), crane())[kind]


def base_probabilities(label: int, bias: float) -> np.ndarray:
    p = np.full(3, (1.0 - bias) / 2.0)
    p[label] = bias
    return p


def make_graph(
    label: int,
    base: int,
    rng: np.random.Generator,
    graph_id: int = 0,
    split: str | None = None,
    base_scale: float = 1.0,
) -> Graph:
    """One motif+base graph with node order shuffled and gt flags on motif edges."""
    motif = _motif_edges(label)
    m = node_count(motif)
    base_e = _base_edges(base, rng, base_scale)
    b = node_count(base_e)
    edges = [(u, v, True) for u, v in motif] + [(u + m, v + m, False) for u, v in base_e]
    attach: set[tuple[int, int]] = set()
    while len(attach) < ATTACHMENT_EDGES:
        attach.add((int(rng.integers(0, m)), int(rng.integers(m, m + b))))
    edges += [(u, v, False) for u, v in sorted(attach)]
    n = m + b
    perm = rng.permutation(n)
    arr = np.array([(perm[u], perm[v]) for u, v, _ in edges], dtype=np.int64)
    arr.sort(axis=1)
    flags = np.array([f for *_, f in edges], dtype=bool)
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    return Graph(
        node_count=n,
        edges=arr[order],
        x=rng.random((n, FEATURE_DIM)),
        label=label,
        gt_rationale=flags[order],
        graph_id=graph_id,
        split=split,
    )


def generate_spmotif(cfg: SpmotifConfig) -> tuple[list[Graph], np.ndarray]:
    """All three splits in order train, val, test; returns graphs and base ids."""
    graphs: list[Graph] = []
    bases: list[int] = []
    gid = 0
    for split, count in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        for k in range(count):
            rng = np.random.default_rng([cfg.seed, SPLIT_CODES[split], k])
            label = int(rng.integers(0, 3))
            bias = cfg.bias if split != "test" else 1.0 / 3.0
            base = int(rng.choice(3, p=base_probabilities(label, bias)))
            graphs.append(make_graph(label, base, rng, graph_id=gid, split=split, base_scale=cfg.base_scale))
            bases.append(base)
            gid += 1
    return graphs, np.asarray(bases, dtype=np.int64)


def bias_statistics(graphs: list[Graph], bases: np.ndarray) -> dict:
    """Empirical class balance and matched-base frequency per split."""
    stats = {}
    labels = np.array([g.label for g in graphs])
    splits = np.array([g.split for g in graphs])
    for split in ("train", "val", "test"):
        sel = splits == split
        if not sel.any():
            continue
        y, s = labels[sel], bases[sel]
        table = np.zeros((3, 3), dtype=int)
        np.add.at(table, (y, s), 1)
        stats[split] = {
            "count": int(sel.sum()),
            "class_frequency": (np.bincount(y, minlength=3) / sel.sum()).tolist(),
            "matched_base_frequency": float(np.mean(y == s)),
            "label_by_base_counts": table.tolist(),
        }
    return stats
