"""Edge-weighted GIN encoder, mean readout and the two MLP heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphBatch


@dataclass(frozen=True)
class Architecture:
    feature_dim: int
    hidden: int = 32
    layers: int = 3
    classes: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _mlp_params(prefix: str, dims: list[int], rng: np.random.Generator) -> dict[str, Tensor]:
    out = {}
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        out[f"{prefix}.{k}.W"] = Tensor(_glorot(rng, a, b), requires_grad=True)
        out[f"{prefix}.{k}.b"] = Tensor(np.zeros(b), requires_grad=True)
    return out


def init_params(arch: Architecture, rng: np.random.Generator) -> dict[str, Tensor]:
    """GNN_1 layers, MLP_1 mask head and MLP_2 classifier, Glorot-uniform weights."""
    h = arch.hidden
    params: dict[str, Tensor] = {}
    for layer in range(arch.layers):
        d_in = arch.feature_dim if layer == 0 else h
        params.update(_mlp_params(f"gnn.{layer}", [d_in, h, h], rng))
    params.update(_mlp_params("mask", [2 * h, h, 1], rng))
    params.update(_mlp_params("cls", [h, h, arch.classes], rng))
    for name, p in params.items():
        p.name = name
    return params


def _mlp(x: Tensor, params: dict[str, Tensor], prefix: str, depth: int = 2) -> Tensor:
    for k in range(depth):
        x = x @ params[f"{prefix}.{k}.W"] + params[f"{prefix}.{k}.b"]
        if k < depth - 1:
            x = ad.relu(x)
    return x


def gin_encode(
    batch: GraphBatch,
    edge_weight: Tensor | np.ndarray | None,
    params: dict[str, Tensor],
    eps: float = 0.0,
) -> Tensor:
    """Node embeddings after ``h_v <- MLP((1+eps) h_v + sum_u w_uv h_u)`` per layer.

    ``edge_weight`` has one entry per undirected batch edge and gates both
    directions; ``None`` means all ones.
    """
    layers = sum(1 for k in params if k.startswith("gnn.") and k.endswith(".0.W"))
    first = params["gnn.0.0.W"]
    if batch.x.shape[1] != first.shape[0]:
        raise ad.ShapeError(f"feature_dim {batch.x.shape[1]} does not match encoder input {first.shape[0]}")
    if edge_weight is None:
        edge_weight = np.ones(batch.num_edges)
    edge_weight = ad.as_tensor(edge_weight)
    if edge_weight.shape != (batch.num_edges,):
        raise ad.ShapeError(f"edge_weight shape {edge_weight.shape}, expected ({batch.num_edges},)")
    directed = ad.concat([edge_weight, edge_weight]) if edge_weight.requires_grad else Tensor(
        np.concatenate([edge_weight.data, edge_weight.data])
    )
    h = Tensor(batch.x)
    for layer in range(layers):
        agg = ad.propagate(h, batch.src, batch.dst, directed, batch.num_nodes)
        z = h * (1.0 + eps) + agg if eps else h + agg
        h = _mlp(z, params, f"gnn.{layer}")
        if layer < layers - 1:
            h = ad.relu(h)
    return h


def readout(node_emb: Tensor, batch: GraphBatch, node_weight: np.ndarray | None = None) -> Tensor:
    """Mean (or weighted mean) pooling per graph; empty selections raise GraphError."""
    return ad.spmm(batch.pooling_matrix(node_weight), node_emb)


def mask_head(node_emb: Tensor, edges: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Rationale probability per stored edge, symmetrised over both orientations."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    hu = ad.take(node_emb, edges[:, 0])
    hv = ad.take(node_emb, edges[:, 1])
    forward = ad.sigmoid(_mlp(ad.concat([hu, hv], axis=1), params, "mask"))
    backward = ad.sigmoid(_mlp(ad.concat([hv, hu], axis=1), params, "mask"))
    return ad.reshape((forward + backward) * 0.5, (len(edges),))


def classify(graph_emb: Tensor, params: dict[str, Tensor]) -> Tensor:
    return _mlp(graph_emb, params, "cls")
