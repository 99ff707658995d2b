"""Environment diversity augmentation.

Two environment subgraphs are placed side by side (block-diagonal extended
graph), their environment masks are blended with weight ``lam``, a new
environment is sampled from the blend, and it is glued to the rationale of
the first graph with degree-proportional bridge edges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, GraphError, Part, SubgraphSplit, merge_parts, nodes_of
from .prse import ConcreteSampleConfig, relaxed_bernoulli

log = logging.getLogger(__name__)

MAX_ENV_RETRIES = 5


class DegenerateMix(GraphError):
    """The pair cannot produce an augmented graph (empty side, too few nodes)."""


def environment_part(split: SubgraphSplit) -> Part:
    """Edge-induced environment subgraph: environment edges and their endpoints."""
    env = split.environment_edges
    return Part(split.parent, nodes_of(split.parent, env), env)


@dataclass(eq=False)
class MixedEnvironmentSpec:
    extended: Graph
    blocks: tuple[Part, Part]
    block_of_edge: np.ndarray
    mixed_mask: Tensor
    lam: float
    sources: tuple[int, int]
    source_edge_ids: np.ndarray = field(default=None)

    @property
    def extended_edges(self) -> np.ndarray:
        return self.extended.edges

    @property
    def num_edges(self) -> int:
        return self.extended.num_edges


def mix_environments(
    split_i: SubgraphSplit,
    split_j: SubgraphSplit,
    lam: float,
    mask_i: Tensor | np.ndarray,
    mask_j: Tensor | np.ndarray,
) -> MixedEnvironmentSpec:
    """Block-diagonal extended environment with ``lam * M_ie`` / ``(1-lam) * M_je``.

    ``mask_i``/``mask_j`` are the full rationale masks ``M_r`` of the two
    graphs; the environment mask is ``1 - M_r`` on each graph's environment
    edges.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    part_i, part_j = environment_part(split_i), environment_part(split_j)
    if part_i.num_edges == 0 or part_j.num_edges == 0:
        raise DegenerateMix(f"degenerate mix: empty environment in pair ({split_i.parent.graph_id}, {split_j.parent.graph_id})")
    mask_i, mask_j = ad.as_tensor(mask_i), ad.as_tensor(mask_j)
    env_i = 1.0 - ad.take(mask_i, part_i.edge_ids)
    env_j = 1.0 - ad.take(mask_j, part_j.edge_ids)
    mixed = ad.concat([env_i * lam, env_j * (1.0 - lam)])
    extended, _ = merge_parts([part_i, part_j], graph_id=split_i.parent.graph_id)
    block = np.concatenate([np.zeros(part_i.num_edges, np.int64), np.ones(part_j.num_edges, np.int64)])
    return MixedEnvironmentSpec(
        extended=extended,
        blocks=(part_i, part_j),
        block_of_edge=block,
        mixed_mask=mixed,
        lam=float(lam),
        sources=(split_i.parent.graph_id, split_j.parent.graph_id),
        source_edge_ids=np.concatenate([part_i.edge_ids, part_j.edge_ids]),
    )


def sample_mixed_environment(
    spec: MixedEnvironmentSpec,
    cfg: ConcreteSampleConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, Tensor]:
    """Bernoulli(mixed_mask) per extended edge through the concrete relaxation.

    Returns the sampled extended-edge ids and the relaxed values of all
    extended edges (gradients flow into the two source masks).
    """
    hard, relaxed = relaxed_bernoulli(spec.mixed_mask, cfg, rng)
    return np.flatnonzero(hard), relaxed


@dataclass(eq=False)
class AugmentedGraph:
    graph: Graph
    provenance: dict
    rationale_edge_ids: np.ndarray
    environment_edge_ids: np.ndarray
    num_bridges: int

    @property
    def label(self) -> int:
        return self.graph.label


def bridge_count(split_i: SubgraphSplit, graph_j: Graph, r_add: float) -> int:
    return int(round(r_add * (split_i.parent.num_edges + graph_j.num_edges)))


def _sample_bridges(
    deg_r: np.ndarray,
    deg_e: np.ndarray,
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Distinct (rationale, environment) local node pairs, endpoints ~ degree."""
    pr = deg_r / deg_r.sum()
    pe = deg_e / deg_e.sum()
    chosen: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    while len(chosen) < count:
        need = count - len(chosen)
        rs = rng.choice(len(pr), size=need, p=pr)
        es = rng.choice(len(pe), size=need, p=pe)
        for a, b in zip(rs.tolist(), es.tolist()):
            if (a, b) not in seen and len(chosen) < count:
                seen.add((a, b))
                chosen.append((a, b))
    return np.asarray(chosen, dtype=np.int64).reshape(-1, 2)


def synthesize_augmented(
    split_i: SubgraphSplit,
    spec: MixedEnvironmentSpec,
    sampled_edges: np.ndarray,
    r_add: float,
    rng: np.random.Generator,
    graph_j: Graph | None = None,
    graph_id: int | None = None,
    bridges: np.ndarray | None = None,
) -> AugmentedGraph:
    """Rationale of graph i + sampled mixed environment + ``N_add`` bridges.

    ``bridges`` overrides the degree-based choice; it is given as
    (rationale node, environment node) pairs in merged local numbering.
    """
    if not 0.0 < r_add <= 1.0:
        raise ValueError("r_add must lie in (0, 1]")
    if len(split_i.rationale_edges) == 0:
        raise DegenerateMix("empty rationale side")
    sampled_edges = np.asarray(sampled_edges, dtype=np.int64)
    if len(sampled_edges) == 0:
        raise DegenerateMix("sampled environment is empty")
    ext = spec.extended
    r_part = Part(split_i.parent, split_i.rationale_nodes, split_i.rationale_edges)
    e_part = Part(ext, nodes_of(ext, sampled_edges), sampled_edges)
    if bridges is None:
        if graph_j is None:
            raise ValueError("graph_j is needed to size the bridge set")
        n_add = bridge_count(split_i, graph_j, r_add)
        if n_add > r_part.num_nodes * e_part.num_nodes:
            raise DegenerateMix(f"cannot place {n_add} distinct bridges")
        deg_r = split_i.parent.degrees(split_i.rationale_edges)[r_part.nodes]
        deg_e = ext.degrees(sampled_edges)[e_part.nodes]
        local = _sample_bridges(deg_r.astype(float), deg_e.astype(float), n_add, rng)
    else:
        local = np.asarray(bridges, dtype=np.int64).reshape(-1, 2)
    merged_bridges = local + np.array([0, r_part.num_nodes])
    g, _ = merge_parts([r_part, e_part], bridges=merged_bridges, label=split_i.parent.label, graph_id=graph_id)
    block = spec.block_of_edge[sampled_edges]
    provenance = {
        "i": spec.sources[0],
        "j": spec.sources[1],
        "lambda": spec.lam,
        "bridge_edges": (merged_bridges).tolist(),
        "environment_edge_count": int(len(sampled_edges)),
        "environment_edges_from_i": int((block == 0).sum()),
        "environment_edges_from_j": int((block == 1).sum()),
    }
    return AugmentedGraph(g, provenance, split_i.rationale_edges.copy(), sampled_edges, len(merged_bridges))


def augment_pair(
    split_i: SubgraphSplit,
    split_j: SubgraphSplit,
    mask_i: Tensor | np.ndarray,
    mask_j: Tensor | np.ndarray,
    lam: float,
    r_add: float,
    cfg: ConcreteSampleConfig,
    rng: np.random.Generator,
    graph_id: int | None = None,
) -> tuple[AugmentedGraph, MixedEnvironmentSpec, Tensor]:
    """Mix, sample (with retries) and synthesize one augmented graph."""
    spec = mix_environments(split_i, split_j, lam, mask_i, mask_j)
    for attempt in range(MAX_ENV_RETRIES):
        sampled, relaxed = sample_mixed_environment(spec, cfg, rng)
        try:
            aug = synthesize_augmented(split_i, spec, sampled, r_add, rng, graph_j=split_j.parent, graph_id=graph_id)
        except DegenerateMix:
            if len(split_i.rationale_edges) == 0:
                raise
            continue
        return aug, spec, relaxed
    raise DegenerateMix(f"pair {spec.sources}: no usable environment after {MAX_ENV_RETRIES} draws")


def plan_augmentation(n_train: int, r_aug: float, rng: np.random.Generator) -> np.ndarray:
    """``round(r_aug * n_train)`` pairs ``(i, j)``, i uniform, j uniform over j != i."""
    if not 0.0 <= r_aug <= 1.0:
        raise ValueError("r_aug must lie in [0, 1]")
    n_aug = int(round(r_aug * n_train))
    if n_aug == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if n_train < 2:
        raise ValueError("augmentation needs at least two training graphs")
    i = rng.integers(0, n_train, size=n_aug)
    j = (i + rng.integers(1, n_train, size=n_aug)) % n_train
    return np.stack([i, j], axis=1)


def lambda_for_pair(policy: str, lam: float, rng: np.random.Generator) -> float:
    if policy == "fixed":
        return lam
    if policy == "uniform":
        return float(rng.uniform(0.3, 0.7))
    raise ValueError(f"unknown lambda policy {policy!r}")
