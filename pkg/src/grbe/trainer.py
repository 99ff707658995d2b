"""Loss assembly, the mini-batch training loop, inference and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import eda, encoder, metrics, prse
from .autodiff import Adam, NumericDivergence, Tensor
from .encoder import Architecture
from .graph import Graph, GraphBatch, Part, SubgraphSplit, collate, partition

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "grbe-checkpoint"
CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = (
    "epoch", "L_r", "L_a", "L_c", "L_s", "total",
    "train_acc", "val_acc", "rationale_auc", "aug_distance",
)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    beta: float = 0.1
    gamma: float = 0.5
    r_s: float = 0.7
    r_aug: float = 0.2
    r_add: float = 0.1
    lam: float = 0.5
    lam_policy: str = "fixed"
    temperature: float = 1.0
    temperature_final: float | None = None
    tau: float = 0.5
    positive_keep_prob: float = 0.5
    negative_keep_prob: float = 0.5
    normalize_embeddings: bool = True
    hidden: int = 32
    layers: int = 3
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    erm: bool = False
    rationale_gating: str = "relaxed"
    view_gating: str = "hard"

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("r_s", "r_aug", "lam"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.r_add <= 1.0:
            raise ValueError("r_add must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1 or self.layers < 1:
            raise ValueError("epochs, batch_size, hidden and layers must be >= 1")
        if self.lam_policy not in ("fixed", "uniform"):
            raise ValueError("lam_policy must be 'fixed' or 'uniform'")
        if self.rationale_gating not in ("relaxed", "selected"):
            raise ValueError("rationale_gating must be 'relaxed' or 'selected'")
        if self.view_gating not in ("hard", "relaxed"):
            raise ValueError("view_gating must be 'hard' or 'relaxed'")
        if self.temperature <= 0 or (self.temperature_final is not None and self.temperature_final <= 0):
            raise ValueError("temperatures must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def temperature_at(self, epoch: int) -> float:
        if self.temperature_final is None or self.epochs == 1:
            return self.temperature
        frac = epoch / (self.epochs - 1)
        return self.temperature + frac * (self.temperature_final - self.temperature)

    def contrastive(self) -> prse.ContrastiveConfig:
        return prse.ContrastiveConfig(self.tau, self.positive_keep_prob, self.negative_keep_prob, self.normalize_embeddings)


@dataclass
class LossBundle:
    total: Tensor
    L_r: float
    L_a: float = float("nan")
    L_c: float = float("nan")
    L_s: float = float("nan")
    predictions: np.ndarray | None = None
    augmented: list = field(default_factory=list)

    def as_row(self) -> dict:
        return {"L_r": self.L_r, "L_a": self.L_a, "L_c": self.L_c, "L_s": self.L_s, "total": self.total.item()}


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean multiclass cross-entropy from raw logits."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.total(logits * onehot, axis=1)
    return ad.mean(ad.logsumexp(logits, axis=1) - picked)


def _edge_graph(batch: GraphBatch) -> np.ndarray:
    return np.repeat(np.arange(batch.num_graphs), np.diff(batch.edge_offsets))


def _rationale_node_weight(batch: GraphBatch, hard: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """1 on nodes touching a hard rationale edge; whole graph when a graph has none."""
    w = np.zeros(batch.num_nodes)
    w[batch.edges[hard].reshape(-1)] = 1.0
    per_graph = np.bincount(batch.node_graph, weights=w, minlength=batch.num_graphs)
    empty = per_graph == 0
    if empty.any():
        w[empty[batch.node_graph]] = 1.0
    return w, empty


def _splits(graphs: Sequence[Graph], batch: GraphBatch, hard: np.ndarray, relaxed: np.ndarray) -> list[SubgraphSplit]:
    eo = batch.edge_offsets
    return [partition(g, hard[eo[k]:eo[k + 1]], relaxed[eo[k]:eo[k + 1]]) for k, g in enumerate(graphs)]


def _view_weights(views: Sequence[Part], batch: GraphBatch, hard: np.ndarray, relaxed: Tensor) -> Tensor:
    """Relaxed gate per view edge: ``B`` on rationale edges, ``1 - B`` on environment edges."""
    idx = np.concatenate([v.edge_ids + batch.edge_offsets[k] for k, v in enumerate(views)])
    sign = np.where(hard[idx], 1.0, -1.0)
    return ad.take(relaxed, idx) * sign + (1.0 - hard[idx])


def compute_losses(
    graphs: Sequence[Graph],
    params: dict[str, Tensor],
    cfg: TrainConfig,
    rng: np.random.Generator,
    temperature: float | None = None,
) -> LossBundle:
    """Forward pass for one batch and every term of the objective."""
    labels = np.array([g.label for g in graphs])
    batch = collate(graphs)
    node_emb = encoder.gin_encode(batch, None, params)

    if cfg.erm:
        logits = encoder.classify(encoder.readout(node_emb, batch), params)
        loss = cross_entropy(logits, labels)
        return LossBundle(loss, loss.item(), predictions=logits.data.argmax(axis=1))

    if len(graphs) < 2 and cfg.beta > 0:
        raise ValueError("contrastive term needs a batch of at least 2 graphs")
    t = cfg.temperature if temperature is None else temperature
    mask = encoder.mask_head(node_emb, batch.edges, params)
    hard, relaxed = prse.relaxed_bernoulli(mask, prse.ConcreteSampleConfig(t), rng)

    # rationale prediction: relaxed gates on every edge, readout over rationale nodes
    node_w, _ = _rationale_node_weight(batch, hard)
    gate = relaxed * hard.astype(np.float64) if cfg.rationale_gating == "selected" else relaxed
    h_r = encoder.readout(encoder.gin_encode(batch, gate, params), batch, node_w)
    logits_r = encoder.classify(h_r, params)
    L_r = cross_entropy(logits_r, labels)
    total = L_r
    bundle = LossBundle(total, L_r.item(), predictions=logits_r.data.argmax(axis=1))

    splits = _splits(graphs, batch, hard, relaxed.data)

    if cfg.gamma > 0:
        L_s = prse.batched_sparsity_loss(mask, _edge_graph(batch), batch.num_graphs, cfg.r_s)
        total = total + L_s * cfg.gamma
        bundle.L_s = L_s.item()

    if cfg.beta > 0:
        ccfg = cfg.contrastive()
        pos1 = [prse.positive_view(s, ccfg.positive_keep_prob, rng) for s in splits]
        pos2 = [prse.positive_view(s, ccfg.positive_keep_prob, rng) for s in splits]
        neg = [prse.negative_view(s, ccfg.negative_keep_prob, rng) for s in splits]
        h = encoder.readout(node_emb, batch)
        embs = []
        for views in (pos1, pos2, neg):
            vb = collate(views)
            w = _view_weights(views, batch, hard, relaxed) if cfg.view_gating == "relaxed" else None
            embs.append(encoder.readout(encoder.gin_encode(vb, w, params), vb))
        L_c = prse.contrastive_terms(h, embs[0], embs[1], embs[2], ccfg)
        total = total + L_c * cfg.beta
        bundle.L_c = L_c.item()

    if cfg.alpha > 0 and cfg.r_aug > 0:
        L_a, augmented = _augmentation_loss(graphs, batch, splits, mask, relaxed, params, cfg, rng, t)
        if L_a is not None:
            total = total + L_a * cfg.alpha
            bundle.L_a = L_a.item()
        bundle.augmented = augmented

    if not np.isfinite(total.data).all():
        raise NumericDivergence(f"non-finite loss (L_r={bundle.L_r}, L_a={bundle.L_a}, L_c={bundle.L_c}, L_s={bundle.L_s})")
    bundle.total = total
    return bundle


def _augmentation_loss(graphs, batch, splits, mask, relaxed, params, cfg, rng, t):
    pairs = eda.plan_augmentation(len(graphs), cfg.r_aug, rng)
    eo = batch.edge_offsets
    scfg = prse.ConcreteSampleConfig(t)
    aug_graphs, weights, labels = [], [], []
    for i, j in pairs.tolist():
        lam = eda.lambda_for_pair(cfg.lam_policy, cfg.lam, rng)
        mask_i = ad.take(mask, np.arange(eo[i], eo[i + 1]))
        mask_j = ad.take(mask, np.arange(eo[j], eo[j + 1]))
        try:
            aug, spec, mix_relaxed = eda.augment_pair(splits[i], splits[j], mask_i, mask_j, lam, cfg.r_add, scfg, rng)
        except eda.DegenerateMix as exc:
            log.debug("skipping augmentation pair (%d, %d): %s", i, j, exc)
            continue
        aug_graphs.append(aug)
        labels.append(graphs[i].label)
        weights.append(ad.take(relaxed, aug.rationale_edge_ids + eo[i]))
        weights.append(ad.take(mix_relaxed, aug.environment_edge_ids))
        weights.append(Tensor(np.ones(aug.num_bridges)))
    if not aug_graphs:
        return None, []
    ab = collate([a.graph for a in aug_graphs])
    h_aug = encoder.readout(encoder.gin_encode(ab, ad.concat(weights), params), ab)
    return cross_entropy(encoder.classify(h_aug, params), np.array(labels)), aug_graphs


# ---------------------------------------------------------------------------
# inference


@dataclass
class Inference:
    predictions: np.ndarray
    masks: list[np.ndarray]
    hard: list[np.ndarray]
    fallback: np.ndarray
    node_embeddings: list[np.ndarray] = field(default_factory=list)


def predict(params: dict[str, Tensor], graphs: Sequence[Graph], cfg: TrainConfig, batch_size: int = 128) -> Inference:
    """Hard-threshold rationale selection and label prediction, no sampling."""
    preds, masks, hards, fallback = [], [], [], []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        batch = collate(chunk)
        node_emb = encoder.gin_encode(batch, None, params)
        eo = batch.edge_offsets
        if cfg.erm:
            logits = encoder.classify(encoder.readout(node_emb, batch), params)
            m = encoder.mask_head(node_emb, batch.edges, params).data
            hard = m > 0.5
            empty = np.zeros(len(chunk), dtype=bool)
        else:
            m = encoder.mask_head(node_emb, batch.edges, params).data
            hard = m > 0.5
            node_w, empty = _rationale_node_weight(batch, hard)
            gate = hard.astype(np.float64)
            if empty.any():
                eg = _edge_graph(batch)
                gate[empty[eg]] = 1.0
            h = encoder.readout(encoder.gin_encode(batch, gate, params), batch, node_w)
            logits = encoder.classify(h, params)
        preds.append(logits.data.argmax(axis=1))
        fallback.append(empty)
        for k in range(len(chunk)):
            masks.append(m[eo[k]:eo[k + 1]].copy())
            hards.append(hard[eo[k]:eo[k + 1]].copy())
    return Inference(np.concatenate(preds), masks, hards, np.concatenate(fallback))


def infer(params: dict[str, Tensor], graph: Graph, cfg: TrainConfig) -> tuple[int, np.ndarray, SubgraphSplit, bool]:
    """Single graph: (predicted label, edge mask, hard split, fell back to full graph)."""
    res = predict(params, [graph], cfg)
    split = partition(graph, res.hard[0], res.hard[0].astype(np.float64))
    return int(res.predictions[0]), res.masks[0], split, bool(res.fallback[0])


def evaluate(params: dict[str, Tensor], graphs: Sequence[Graph], cfg: TrainConfig) -> metrics.EvalReport:
    res = predict(params, graphs, cfg)
    labels = np.array([g.label for g in graphs])
    per_class = {
        str(c): metrics.accuracy(res.predictions[labels == c], labels[labels == c])
        for c in np.unique(labels).tolist()
    }
    report = metrics.EvalReport(accuracy=metrics.accuracy(res.predictions, labels), per_class_accuracy=per_class)
    if all(g.gt_rationale is not None for g in graphs):
        flags = [g.gt_rationale for g in graphs]
        pooled = np.concatenate(flags) if flags else np.zeros(0, bool)
        if 0 < pooled.sum() < len(pooled):
            report.rationale_auc = metrics.rationale_auc(res.masks, flags)
    report.extra["fallback_count"] = int(res.fallback.sum())
    report.extra["num_graphs"] = len(graphs)
    return report


# ---------------------------------------------------------------------------
# training loop


def init_model(cfg: TrainConfig, feature_dim: int, classes: int) -> tuple[Architecture, dict[str, Tensor]]:
    arch = Architecture(feature_dim=feature_dim, hidden=cfg.hidden, layers=cfg.layers, classes=classes)
    return arch, encoder.init_params(arch, np.random.default_rng([cfg.seed, 7]))


def train(
    graphs: Sequence[Graph],
    cfg: TrainConfig,
    val_graphs: Sequence[Graph] | None = None,
    classes: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Architecture, dict[str, Tensor], list[dict]]:
    if not graphs:
        raise ValueError("empty training set")
    classes = classes or (max(g.label for g in graphs) + 1)
    arch, params = init_model(cfg, graphs[0].feature_dim, classes)
    opt = Adam(params, lr=cfg.learning_rate)
    history: list[dict] = []
    n = len(graphs)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(n)
        t = cfg.temperature_at(epoch)
        sums = {k: [] for k in ("L_r", "L_a", "L_c", "L_s", "total")}
        augmented: list[Graph] = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and not cfg.erm:
                continue
            rng = np.random.default_rng([cfg.seed, epoch, b, 2])
            try:
                bundle = compute_losses([graphs[k] for k in idx], params, cfg, rng, temperature=t)
            except NumericDivergence as exc:
                raise NumericDivergence(f"epoch {epoch} batch {b}: {exc}") from exc
            opt.zero_grad()
            bundle.total.backward()
            try:
                opt.step()
            except NumericDivergence as exc:
                raise NumericDivergence(f"epoch {epoch} batch {b}: {exc}") from exc
            for k, v in bundle.as_row().items():
                sums[k].append(v)
            augmented.extend(a.graph for a in bundle.augmented)
        row = {"epoch": epoch}
        for k, vals in sums.items():
            # batches whose augmentation pairs were all skipped report nan
            row[k] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
        row["train_acc"] = evaluate(params, graphs, cfg).accuracy
        if val_graphs:
            val_report = evaluate(params, val_graphs, cfg)
            row["val_acc"] = val_report.accuracy
            row["rationale_auc"] = val_report.rationale_auc if val_report.rationale_auc is not None else float("nan")
        else:
            row["val_acc"] = float("nan")
            row["rationale_auc"] = float("nan")
        row["aug_distance"] = metrics.distribution_distance(augmented, list(graphs)) if augmented else float("nan")
        history.append(row)
        log.info("epoch %d: %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
        if on_epoch is not None:
            on_epoch(row)
    return arch, params, history


# ---------------------------------------------------------------------------
# persistence


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_history(path: str | Path, history: Sequence[dict]) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(_fmt(row.get(c, float("nan"))) for c in HISTORY_COLUMNS))
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def read_history(path: str | Path) -> list[dict]:
    rows = Path(path).read_text().strip().splitlines()
    header = rows[0].split(",")
    out = []
    for line in rows[1:]:
        vals = line.split(",")
        out.append({h: (int(v) if h == "epoch" else float(v)) for h, v in zip(header, vals)})
    return out


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(text)
    tmp.replace(path)


def save_checkpoint(path: str | Path, arch: Architecture, params: dict[str, Tensor], cfg: TrainConfig | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": arch.to_dict(),
        "train_config": cfg.to_dict() if cfg is not None else None,
        "params": {
            name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in sorted(params.items())
        },
    }
    _atomic_write(Path(path), json.dumps(payload, sort_keys=True) + "\n")


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path) -> tuple[Architecture, dict[str, Tensor], TrainConfig | None]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version-{CHECKPOINT_VERSION} GRBE checkpoint")
    arch = Architecture(**payload["architecture"])
    expected = encoder.init_params(arch, np.random.default_rng(0))
    params = {}
    for name, ref in expected.items():
        entry = payload["params"].get(name)
        if entry is None or tuple(entry["shape"]) != ref.shape:
            raise CheckpointError(f"checkpoint parameter {name!r} is missing or has the wrong shape")
        params[name] = Tensor(np.asarray(entry["data"], dtype=np.float64).reshape(ref.shape), requires_grad=True, name=name)
    extra = set(payload["params"]) - set(expected)
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameters {sorted(extra)}")
    cfg = TrainConfig.from_dict(payload["train_config"]) if payload.get("train_config") else None
    return arch, params, cfg


# ---------------------------------------------------------------------------
# finite-difference check of the full objective


def gradient_check(
    graphs: Sequence[Graph],
    cfg: TrainConfig,
    seed: int,
    max_coords: int = 20,
    h: float = 1e-5,
) -> tuple[float, dict[str, float]]:
    """Max relative error of the full-objective gradient, overall and per parameter.

    The sampling noise is frozen by re-seeding the batch rng on every loss
    evaluation.
    """
    classes = max(g.label for g in graphs) + 1
    _, params = init_model(cfg, graphs[0].feature_dim, classes)

    def loss_fn():
        return compute_losses(list(graphs), params, cfg, np.random.default_rng([seed, 3])).total

    return ad.grad_check(loss_fn, params, h=h, max_coords=max_coords, rng=np.random.default_rng([seed, 4]), per_group=True)
