"""Rationale extraction: mask estimation, relaxed Bernoulli sampling, sparsity
control and the contrastive refinement built from positive/negative views."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import encoder
from .autodiff import Tensor
from .graph import Graph, GraphError, Part, SubgraphSplit, collate, partition, perturb_edges

log = logging.getLogger(__name__)

MASK_CLAMP = 1e-6


@dataclass(frozen=True)
class ConcreteSampleConfig:
    temperature: float = 1.0
    mode: str = "train"  # "train" (relaxed) or "eval" (hard threshold, no noise)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.5
    positive_keep_prob: float = 0.5
    negative_keep_prob: float = 0.5
    normalize: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        for p in (self.positive_keep_prob, self.negative_keep_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("keep probabilities must lie in [0, 1]")


def estimate_mask(graph: Graph, params: dict[str, Tensor]) -> Tensor:
    batch = collate([graph])
    h = encoder.gin_encode(batch, None, params)
    return encoder.mask_head(h, batch.edges, params)


def relaxed_bernoulli(
    prob: Tensor | np.ndarray,
    cfg: ConcreteSampleConfig,
    rng: np.random.Generator | None = None,
    uniform: np.ndarray | None = None,
) -> tuple[np.ndarray, Tensor]:
    """Concrete relaxation of ``Bern(prob)``.

    Returns ``(hard, relaxed)`` where ``relaxed = sigmoid((logit(p) + logit(u)) / t)``
    and ``hard = relaxed > 0.5`` (an exact ``Bern(p)`` draw for every ``t``).
    Probabilities of exactly 0 or 1 give deterministic hard draws.
    """
    prob = ad.as_tensor(prob)
    if cfg.mode == "eval":
        hard = prob.data > 0.5
        return hard, Tensor(hard.astype(np.float64))
    if uniform is None:
        if rng is None:
            raise ValueError("train-mode sampling needs an rng or explicit uniforms")
        uniform = rng.random(prob.shape)
    u = np.clip(uniform, MASK_CLAMP, 1.0 - MASK_CLAMP)
    p = ad.clip(prob, MASK_CLAMP, 1.0 - MASK_CLAMP)
    logit = ad.log(p) - ad.log(1.0 - p)
    relaxed = ad.sigmoid((logit + np.log(u / (1.0 - u))) * (1.0 / cfg.temperature))
    hard = relaxed.data > 0.5
    hard = (hard & (prob.data > 0.0)) | (prob.data >= 1.0)
    return hard, relaxed


def sample_rationale(
    graph: Graph,
    mask: Tensor | np.ndarray,
    cfg: ConcreteSampleConfig,
    rng: np.random.Generator | None = None,
) -> tuple[SubgraphSplit, Tensor]:
    mask = ad.as_tensor(mask)
    if mask.shape != (graph.num_edges,):
        raise GraphError(f"mask has shape {mask.shape}, graph has {graph.num_edges} edges")
    hard, relaxed = relaxed_bernoulli(mask, cfg, rng)
    return partition(graph, hard, relaxed.data), relaxed


def sparsity_loss(mask: Tensor | np.ndarray, r_s: float) -> Tensor:
    """``|mean(M_r) - r_s|`` for one graph's mask."""
    mask = ad.as_tensor(mask)
    if mask.data.size == 0:
        raise GraphError("sparsity loss of a graph without edges")
    return ad.absolute(ad.mean(mask) - r_s)


def batched_sparsity_loss(mask: Tensor, edge_graph: np.ndarray, num_graphs: int, r_s: float) -> Tensor:
    """Per-graph sparsity loss averaged over the batch."""
    counts = np.bincount(edge_graph, minlength=num_graphs).astype(np.float64)
    if np.any(counts == 0):
        raise GraphError("sparsity loss of a graph without edges")
    avg = sp.csr_matrix((1.0 / counts[edge_graph], (edge_graph, np.arange(len(edge_graph)))), shape=(num_graphs, len(edge_graph)))
    per_graph = ad.spmm(avg, ad.reshape(mask, (len(edge_graph), 1)))
    return ad.mean(ad.absolute(per_graph - r_s))


# ---------------------------------------------------------------------------
# contrastive views


def positive_view(split: SubgraphSplit, keep_prob: float, rng: np.random.Generator) -> Part:
    """Rationale kept intact, environment edges dropped independently."""
    g = split.parent
    if len(split.environment_edges) == 0:
        log.debug("graph %d: empty environment, positive view is the full graph", g.graph_id)
        return Part(g, np.arange(g.node_count), np.arange(g.num_edges))
    kept_env = perturb_edges(split.environment_edges, keep_prob, rng)
    edge_ids = np.sort(np.concatenate([split.rationale_edges, kept_env]))
    nodes = np.union1d(split.rationale_nodes, g.edges[kept_env].reshape(-1))
    if len(nodes) == 0:
        # nothing survived; keep a single node so the view can still be encoded
        nodes = np.array([0])
    return Part(g, nodes, edge_ids)


def negative_view(split: SubgraphSplit, keep_prob: float, rng: np.random.Generator) -> Part:
    """Environment kept intact, rationale edges dropped independently."""
    g = split.parent
    if len(split.rationale_edges) == 0:
        log.debug("graph %d: empty rationale, negative view is the full graph", g.graph_id)
        return Part(g, np.arange(g.node_count), np.arange(g.num_edges))
    kept_r = perturb_edges(split.rationale_edges, keep_prob, rng)
    edge_ids = np.sort(np.concatenate([split.environment_edges, kept_r]))
    nodes = np.union1d(split.environment_nodes, g.edges[edge_ids].reshape(-1))
    if len(nodes) == 0:
        nodes = np.array([0])
    return Part(g, nodes, edge_ids)


def make_positive_pair(split: SubgraphSplit, cfg: ContrastiveConfig, rng: np.random.Generator) -> tuple[Graph, Graph]:
    first = positive_view(split, cfg.positive_keep_prob, rng)
    second = positive_view(split, cfg.positive_keep_prob, rng)
    return first.to_graph(), second.to_graph()


def make_negative(split: SubgraphSplit, cfg: ContrastiveConfig, rng: np.random.Generator) -> Graph:
    return negative_view(split, cfg.negative_keep_prob, rng).to_graph()


def _l2_normalize(a: Tensor) -> Tensor:
    norm = ad.sqrt(ad.total(a * a, axis=1, keepdims=True) + 1e-12)
    return a / norm


def infonce(anchor: Tensor, partner: Tensor, tau: float, normalize: bool = True) -> Tensor:
    """InfoNCE estimate with in-batch negatives; rows are paired by index.

    Always ``<= 0``; equals ``-log N`` when all embeddings coincide.
    """
    anchor, partner = ad.as_tensor(anchor), ad.as_tensor(partner)
    if anchor.ndim != 2 or anchor.shape != partner.shape:
        raise ad.ShapeError(f"infonce: {anchor.shape} vs {partner.shape}")
    if anchor.shape[0] < 2:
        raise ValueError("infonce needs a batch of at least 2 for in-batch negatives")
    if normalize:
        anchor, partner = _l2_normalize(anchor), _l2_normalize(partner)
    scores = (anchor @ partner.T) * (1.0 / tau)
    n = anchor.shape[0]
    # the diagonal of the score matrix itself, so positive <= logsumexp holds in floating point
    positive = ad.take(ad.reshape(scores, (n * n,)), np.arange(n) * (n + 1))
    return ad.mean(positive - ad.logsumexp(scores, axis=1))


def contrastive_terms(h: Tensor, pos1: Tensor, pos2: Tensor, neg: Tensor, cfg: ContrastiveConfig) -> Tensor:
    """``L_c = -I(h1+, h2+) + I(h, h-)`` from graph-level embeddings."""
    return infonce(h, neg, cfg.tau, cfg.normalize) - infonce(pos1, pos2, cfg.tau, cfg.normalize)


def contrastive_loss(
    graphs: Sequence[Graph],
    splits: Sequence[SubgraphSplit],
    params: dict[str, Tensor],
    cfg: ContrastiveConfig,
    rng: np.random.Generator,
) -> Tensor:
    """Build views per graph, encode everything with GNN_1 and combine."""
    if len(graphs) < 2:
        raise ValueError("contrastive loss needs at least 2 graphs")
    pos1, pos2, neg = [], [], []
    for split in splits:
        pos1.append(positive_view(split, cfg.positive_keep_prob, rng))
        pos2.append(positive_view(split, cfg.positive_keep_prob, rng))
        neg.append(negative_view(split, cfg.negative_keep_prob, rng))

    def embed(items):
        b = collate(items)
        return encoder.readout(encoder.gin_encode(b, None, params), b)

    return contrastive_terms(embed(list(graphs)), embed(pos1), embed(pos2), embed(neg), cfg)
