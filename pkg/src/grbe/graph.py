"""Graph containers, edge partitions and the JSON-Lines corpus format.

Undirected edges are stored once as ``(u, v)`` with ``u < v``.  Masks and
sampling indicators are indexed by that stored edge order; message passing
expands every stored edge into both directions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Contract violation on a graph or one of its derived parts."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    node_count: int
    edges: np.ndarray
    x: np.ndarray
    label: int = 0
    gt_rationale: np.ndarray | None = None
    graph_id: int = 0
    split: str | None = None

    def __post_init__(self):
        n = int(self.node_count)
        if n < 1:
            raise GraphError("a graph needs at least one node")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if edges.min() < 0 or edges.max() >= n:
                raise GraphError(f"edge endpoint out of range [0, {n})")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise GraphError("self-loops are not allowed")
            edges = np.sort(edges, axis=1)
            keys = edges[:, 0] * n + edges[:, 1]
            if len(np.unique(keys)) != len(keys):
                raise GraphError("duplicate undirected edge")
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != n:
            raise GraphError(f"feature matrix must have {n} rows, got shape {x.shape}")
        gt = self.gt_rationale
        if gt is not None:
            gt = np.asarray(gt, dtype=bool).reshape(-1)
            if len(gt) != len(edges):
                raise GraphError("gt_rationale needs exactly one flag per edge")
            gt = _frozen(gt)
        object.__setattr__(self, "node_count", n)
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "gt_rationale", gt)
        object.__setattr__(self, "graph_id", int(self.graph_id))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def degrees(self, edge_ids: np.ndarray | None = None) -> np.ndarray:
        e = self.edges if edge_ids is None else self.edges[edge_ids]
        return np.bincount(e.reshape(-1), minlength=self.node_count)

    def canonical_edges(self) -> list[tuple[int, int]]:
        return sorted(map(tuple, self.edges.tolist()))

    def to_record(self) -> dict:
        rec = {
            "id": self.graph_id,
            "n": self.node_count,
            "edges": self.edges.tolist(),
            "x": self.x.tolist(),
            "y": self.label,
        }
        if self.gt_rationale is not None:
            rec["gt_rationale"] = self.gt_rationale.astype(int).tolist()
        if self.split is not None:
            rec["split"] = self.split
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Graph":
        try:
            n = int(rec["n"])
            x = np.asarray(rec["x"], dtype=np.float64).reshape(n, -1)
            return cls(
                node_count=n,
                edges=np.asarray(rec.get("edges", []), dtype=np.int64).reshape(-1, 2),
                x=x,
                label=int(rec["y"]),
                gt_rationale=rec.get("gt_rationale"),
                graph_id=int(rec["id"]),
                split=rec.get("split"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphError(f"malformed graph record: {exc}") from exc


@dataclass(frozen=True, eq=False)
class Part:
    """Nodes and stored edges of a source graph, both as index arrays."""

    graph: Graph
    nodes: np.ndarray
    edge_ids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(np.unique(np.asarray(self.nodes, dtype=np.int64))))
        object.__setattr__(self, "edge_ids", _frozen(np.asarray(self.edge_ids, dtype=np.int64).reshape(-1)))
        if len(self.edge_ids):
            ends = self.graph.edges[self.edge_ids].reshape(-1)
            if not np.all(np.isin(ends, self.nodes)):
                raise GraphError("part contains an edge whose endpoint is outside its node set")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edge_ids)

    def to_graph(self, graph_id: int | None = None) -> Graph:
        return merge_parts([self], graph_id=graph_id)[0]


@dataclass(frozen=True, eq=False)
class SubgraphSplit:
    parent: Graph
    hard_indicator: np.ndarray
    relaxed_indicator: np.ndarray
    rationale_edges: np.ndarray = field(init=False)
    environment_edges: np.ndarray = field(init=False)
    rationale_nodes: np.ndarray = field(init=False)
    environment_nodes: np.ndarray = field(init=False)

    def __post_init__(self):
        hard = _frozen(np.asarray(self.hard_indicator, dtype=bool).reshape(-1))
        relaxed = _frozen(np.asarray(self.relaxed_indicator, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "hard_indicator", hard)
        object.__setattr__(self, "relaxed_indicator", relaxed)
        ids = np.arange(self.parent.num_edges)
        object.__setattr__(self, "rationale_edges", _frozen(ids[hard]))
        object.__setattr__(self, "environment_edges", _frozen(ids[~hard]))
        in_r = np.zeros(self.parent.node_count, dtype=bool)
        in_r[self.parent.edges[hard].reshape(-1)] = True
        nodes = np.arange(self.parent.node_count)
        object.__setattr__(self, "rationale_nodes", _frozen(nodes[in_r]))
        object.__setattr__(self, "environment_nodes", _frozen(nodes[~in_r]))

    def _env_kinds(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        in_r = np.zeros(self.parent.node_count, dtype=bool)
        in_r[self.rationale_nodes] = True
        ends = self.parent.edges[self.environment_edges]
        touching = in_r[ends].sum(axis=1)
        env = self.environment_edges
        return env[touching == 0], env[touching == 1], env[touching == 2]

    @property
    def cut_edges(self) -> np.ndarray:
        """Environment edges joining a rationale node to an environment node."""
        return self._env_kinds()[1]

    @property
    def inner_environment_edges(self) -> np.ndarray:
        """Environment edges whose endpoints both lie in the rationale node set."""
        return self._env_kinds()[2]

    def rationale_part(self) -> Part:
        return Part(self.parent, self.rationale_nodes, self.rationale_edges)

    def environment_part(self) -> Part:
        """Environment nodes and the environment edges among them."""
        return Part(self.parent, self.environment_nodes, self._env_kinds()[0])

    def closed_rationale_part(self) -> Part:
        """Rationale nodes with every parent edge among them (inner environment edges included)."""
        return Part(self.parent, self.rationale_nodes, np.sort(np.concatenate([self.rationale_edges, self.inner_environment_edges])))

    def cut_pairs(self) -> np.ndarray:
        """Cut edges as (rationale node, environment node) pairs."""
        ends = self.parent.edges[self.cut_edges]
        in_r = np.isin(ends, self.rationale_nodes)
        return np.where(in_r[:, :1], ends, ends[:, ::-1]).reshape(-1, 2)


def partition(graph: Graph, hard_indicator, relaxed_indicator=None) -> SubgraphSplit:
    hard = np.asarray(hard_indicator).reshape(-1)
    relaxed = hard.astype(np.float64) if relaxed_indicator is None else np.asarray(relaxed_indicator, dtype=np.float64).reshape(-1)
    if len(hard) != graph.num_edges or len(relaxed) != graph.num_edges:
        raise GraphError(
            f"indicator length mismatch: graph has {graph.num_edges} edges, "
            f"got {len(hard)} hard / {len(relaxed)} relaxed"
        )
    if len(relaxed) and (relaxed.min() < 0 or relaxed.max() > 1):
        raise GraphError("relaxed indicator must lie in [0, 1]")
    return SubgraphSplit(graph, hard.astype(bool), relaxed)


def merge_parts(
    parts: Sequence[Part],
    bridges: np.ndarray | None = None,
    label: int | None = None,
    graph_id: int | None = None,
) -> tuple[Graph, np.ndarray]:
    """Disjoint union of parts (node blocks in order) plus bridge edges.

    ``bridges`` are given in merged node numbering.  Returns the graph and, per
    merged node, its position in the concatenated ``part.nodes`` arrays.
    Edges come out in part order followed by the bridges.
    """
    if not parts:
        raise GraphError("nothing to merge")
    offsets = np.cumsum([0] + [p.num_nodes for p in parts])
    xs, edge_blocks, gts = [], [], []
    has_gt = all(p.graph.gt_rationale is not None for p in parts)
    for p, off in zip(parts, offsets[:-1]):
        xs.append(p.graph.x[p.nodes])
        local = np.searchsorted(p.nodes, p.graph.edges[p.edge_ids])
        edge_blocks.append(local.reshape(-1, 2) + off)
        if has_gt:
            gts.append(p.graph.gt_rationale[p.edge_ids])
    n = int(offsets[-1])
    if bridges is not None and len(bridges):
        bridges = np.asarray(bridges, dtype=np.int64).reshape(-1, 2)
        if bridges.min() < 0 or bridges.max() >= n:
            raise GraphError("bridge endpoint out of range")
        edge_blocks.append(bridges)
        if has_gt:
            gts.append(np.zeros(len(bridges), dtype=bool))
    if n == 0:
        raise GraphError("merged graph would have no nodes")
    first = parts[0].graph
    g = Graph(
        node_count=n,
        edges=np.concatenate(edge_blocks) if edge_blocks else np.zeros((0, 2), np.int64),
        x=np.concatenate(xs),
        label=first.label if label is None else label,
        gt_rationale=np.concatenate(gts) if has_gt else None,
        graph_id=first.graph_id if graph_id is None else graph_id,
        split=first.split,
    )
    return g, np.arange(n)


def merge(
    rationale: Part,
    environment: Part,
    bridges: Iterable[tuple[int, int]] = (),
    graph_id: int | None = None,
) -> Graph:
    """Join a rationale part and an environment part through bridge edges.

    Each bridge is ``(r, e)`` with ``r`` a node of the rationale part and ``e``
    a node of the environment part, both in their source graphs' numbering.
    The result carries the rationale source's label.
    """
    if rationale.num_edges == 0:
        raise GraphError("empty rationale side")
    pairs = np.asarray(list(bridges), dtype=np.int64).reshape(-1, 2)
    r_pos = np.searchsorted(rationale.nodes, pairs[:, 0])
    e_pos = np.searchsorted(environment.nodes, pairs[:, 1])
    bad_r = (r_pos >= rationale.num_nodes) | (rationale.nodes[np.minimum(r_pos, rationale.num_nodes - 1)] != pairs[:, 0])
    if environment.num_nodes:
        bad_e = (e_pos >= environment.num_nodes) | (
            environment.nodes[np.minimum(e_pos, environment.num_nodes - 1)] != pairs[:, 1]
        )
    else:
        bad_e = np.ones(len(pairs), dtype=bool)
    if np.any(bad_r) or np.any(bad_e):
        raise GraphError("bridge endpoint is not a node of the corresponding part")
    merged_bridges = np.stack([r_pos, e_pos + rationale.num_nodes], axis=1)
    g, _ = merge_parts(
        [rationale, environment] if environment.num_nodes else [rationale],
        bridges=merged_bridges,
        label=rationale.graph.label,
        graph_id=graph_id,
    )
    return g


def perturb_edges(edge_ids, keep_probability: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each edge independently with ``keep_probability``."""
    if not 0.0 <= keep_probability <= 1.0:
        raise GraphError("keep_probability must lie in [0, 1]")
    edge_ids = np.asarray(edge_ids, dtype=np.int64).reshape(-1)
    draws = rng.random(len(edge_ids))
    return edge_ids[draws < keep_probability]


def nodes_of(graph: Graph, edge_ids: np.ndarray) -> np.ndarray:
    return np.unique(graph.edges[np.asarray(edge_ids, dtype=np.int64)].reshape(-1))


# ---------------------------------------------------------------------------
# batching


@dataclass
class GraphBatch:
    """Disjoint union of several graphs or parts, laid out for message passing.

    Edges of item ``k`` occupy ``edge_offsets[k]:edge_offsets[k + 1]`` in the
    item's own edge order; ``src``/``dst`` list both directions.
    """

    x: np.ndarray
    edges: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    node_graph: np.ndarray
    num_graphs: int
    node_offsets: np.ndarray
    edge_offsets: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.x)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def directed_index(self) -> np.ndarray:
        """Index into the undirected edge list for every directed edge."""
        m = self.num_edges
        return np.concatenate([np.arange(m), np.arange(m)])

    def pooling_matrix(self, node_weight: np.ndarray | None = None) -> sp.csr_matrix:
        """Row-normalised (graphs x nodes) matrix for weighted mean readout."""
        w = np.ones(self.num_nodes) if node_weight is None else np.asarray(node_weight, dtype=np.float64)
        sums = np.bincount(self.node_graph, weights=w, minlength=self.num_graphs)
        if np.any(sums <= 0):
            empty = np.flatnonzero(sums <= 0).tolist()
            raise GraphError(f"empty readout set for batch graphs {empty}")
        vals = w / sums[self.node_graph]
        return sp.csr_matrix((vals, (self.node_graph, np.arange(self.num_nodes))), shape=(self.num_graphs, self.num_nodes))


def collate(items: Sequence[Graph | Part]) -> GraphBatch:
    xs, edges, node_graph = [], [], []
    node_off, edge_off = [0], [0]
    for k, item in enumerate(items):
        if isinstance(item, Graph):
            x, e = item.x, item.edges
        else:
            x = item.graph.x[item.nodes]
            e = np.searchsorted(item.nodes, item.graph.edges[item.edge_ids]).reshape(-1, 2)
        xs.append(x)
        edges.append(e + node_off[-1])
        node_graph.append(np.full(len(x), k, dtype=np.int64))
        node_off.append(node_off[-1] + len(x))
        edge_off.append(edge_off[-1] + len(e))
    e = np.concatenate(edges) if edges else np.zeros((0, 2), np.int64)
    return GraphBatch(
        x=np.concatenate(xs),
        edges=e,
        src=np.concatenate([e[:, 0], e[:, 1]]),
        dst=np.concatenate([e[:, 1], e[:, 0]]),
        node_graph=np.concatenate(node_graph),
        num_graphs=len(items),
        node_offsets=np.asarray(node_off, dtype=np.int64),
        edge_offsets=np.asarray(edge_off, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# JSON-Lines corpus


def write_jsonl(path: str | Path, graphs: Iterable[Graph], extra: Iterable[dict] | None = None) -> None:
    """Write one graph per line; ``extra`` dicts are merged into matching lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    extras = iter(extra) if extra is not None else None
    with tmp.open("w") as fh:
        for g in graphs:
            rec = g.to_record()
            if extras is not None:
                rec.update(next(extras))
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    tmp.replace(path)


def iter_jsonl(path: str | Path) -> Iterator[tuple[Graph, dict]]:
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphError(f"{path}:{lineno}: {exc}") from exc
            try:
                yield Graph.from_record(rec), rec
            except GraphError as exc:
                raise GraphError(f"{path}:{lineno}: {exc}") from exc


def read_jsonl(path: str | Path) -> list[Graph]:
    return [g for g, _ in iter_jsonl(path)]
