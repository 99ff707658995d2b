"""Command-line entry point: ``grbe <command> [flags]``.

Exit codes: 0 success, 1 failed check (gradcheck), 2 usage, 3 data error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import eda, encoder, metrics, plotting, prse, spmotif, trainer
from .autodiff import NumericDivergence
from .graph import Graph, GraphError, Part, collate, iter_jsonl, partition, write_jsonl
from .trainer import CheckpointError, TrainConfig

log = logging.getLogger("grbe")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4

# config-file keys use the hyper-parameter table names; field names work too
CONFIG_ALIASES = {
    "hiddens": "hidden",
    "r": "r_aug",
    "lambda": "lam",
    "t": "temperature",
    "lr": "learning_rate",
}


class UsageError(Exception):
    pass


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(text)
    tmp.replace(path)


def _dump_json(path: Path, payload: dict) -> None:
    _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_corpus(path: str) -> tuple[list[Graph], list[dict]]:
    p = Path(path)
    if not p.is_file():
        raise GraphError(f"corpus {path} does not exist")
    pairs = list(iter_jsonl(p))
    if not pairs:
        raise GraphError(f"corpus {path} is empty")
    return [g for g, _ in pairs], [r for _, r in pairs]


def _select_split(graphs: list[Graph], split: str | None) -> list[Graph]:
    if split in (None, "all"):
        return graphs
    chosen = [g for g in graphs if g.split == split]
    if not chosen:
        raise GraphError(f"corpus has no graphs in split {split!r}")
    return chosen


def _default_split(graphs: list[Graph], preferred: str) -> str:
    return preferred if any(g.split == preferred for g in graphs) else "all"


def _load_model(path: str):
    arch, params, cfg = trainer.load_checkpoint(path)
    return arch, params, cfg or TrainConfig()


def _check_features(arch, graphs: list[Graph]) -> None:
    dims = {g.feature_dim for g in graphs}
    if dims != {arch.feature_dim}:
        raise CheckpointError(f"checkpoint expects feature_dim {arch.feature_dim}, corpus has {sorted(dims)}")


# ---------------------------------------------------------------------------
# config


def read_config_file(path: str) -> dict:
    """Flat key-value file (INI, optional ``[train]`` section) to TrainConfig kwargs."""
    parser = configparser.ConfigParser()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not text.lstrip().startswith("["):
        text = "[train]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise UsageError(f"bad config {path}: {exc}") from exc
    fields = {f for f in TrainConfig.__dataclass_fields__}
    types = {name: f.type for name, f in TrainConfig.__dataclass_fields__.items()}
    out = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            name = CONFIG_ALIASES.get(key, key)
            if name not in fields:
                raise UsageError(f"unknown config key {key!r}")
            out[name] = _coerce(raw, types[name], key)
    return out


def _coerce(raw: str, typ, key: str):
    typ = str(typ)
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ.startswith("float"):
            return None if raw.strip().lower() == "none" else float(raw)
        return raw.strip()
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from exc


def config_snapshot(cfg: TrainConfig) -> str:
    """The effective config in the same format ``--config`` reads."""
    return "[train]\n" + "".join(f"{k} = {v}\n" for k, v in sorted(cfg.to_dict().items()))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_spmotif(args) -> int:
    try:
        cfg = spmotif.SpmotifConfig(
            bias=args.bias, n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
            seed=args.seed, base_scale=args.base_scale,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    graphs, bases = spmotif.generate_spmotif(cfg)
    write_jsonl(out, graphs, ({"base": spmotif.BASES[b]} for b in bases.tolist()))
    meta = {
        "generator": "spmotif",
        "config": cfg.to_dict(),
        "motifs": list(spmotif.MOTIFS),
        "bases": list(spmotif.BASES),
        "feature_dim": spmotif.FEATURE_DIM,
        "statistics": spmotif.bias_statistics(graphs, bases),
    }
    _dump_json(out.with_name(out.name + ".meta.json"), meta)
    print(f"wrote {len(graphs)} graphs to {out}")
    return EXIT_OK


TRAIN_FLAGS = {
    "alpha": float, "beta": float, "gamma": float, "r_s": float, "r_aug": float, "r_add": float,
    "lam": float, "lam_policy": str, "temperature": float, "temperature_final": float, "tau": float,
    "positive_keep_prob": float, "negative_keep_prob": float, "hidden": int, "layers": int,
    "epochs": int, "batch_size": int, "learning_rate": float, "seed": int,
    "rationale_gating": str, "view_gating": str,
}


def _train_config(args) -> TrainConfig:
    kw = read_config_file(args.config) if args.config else {}
    for name in TRAIN_FLAGS:
        val = getattr(args, name)
        if val is not None:
            kw[name] = val
    if args.erm:
        kw["erm"] = True
    if args.no_normalize:
        kw["normalize_embeddings"] = False
    if "seed" not in kw:
        raise UsageError("a seed is required (--seed or 'seed' in the config file)")
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _train_config(args)
    graphs, _ = _load_corpus(args.data)
    train_graphs = _select_split(graphs, _default_split(graphs, "train"))
    val_split = "val" if any(g.split == "val" for g in graphs) else None
    val_graphs = _select_split(graphs, val_split) if val_split else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    classes = max(g.label for g in graphs) + 1

    def progress(row):
        log.info("epoch %d total=%.4f train_acc=%.3f val_acc=%.3f", row["epoch"], row["total"], row["train_acc"], row["val_acc"])

    start = time.perf_counter()
    arch, params, history = trainer.train(train_graphs, cfg, val_graphs, classes=classes, on_epoch=progress)
    log.info("training took %.1fs", time.perf_counter() - start)
    trainer.save_checkpoint(out / "checkpoint.json", arch, params, cfg)
    trainer.write_history(out / "history.csv", history)
    _write_text(out / "config.ini", config_snapshot(cfg))
    if not args.no_figures:
        plotting.plot_history(history, out)
    print(f"wrote checkpoint, history and config to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    arch, params, cfg = _load_model(args.checkpoint)
    graphs, _ = _load_corpus(args.data)
    graphs = _select_split(graphs, args.split or _default_split(graphs, "test"))
    _check_features(arch, graphs)
    report = trainer.evaluate(params, graphs, cfg).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        _write_text(out, text)
        if not args.no_figures and all(g.gt_rationale is not None for g in graphs):
            res = trainer.predict(params, graphs, cfg)
            scores = np.concatenate(res.masks)
            flags = np.concatenate([g.gt_rationale for g in graphs]).astype(float)
            plotting.plot_descriptor_histograms(
                scores[flags == 1][:, None], scores[flags == 0][:, None], ["edge mask score"],
                out.with_name(out.stem + "_mask_scores.png"), labels=("rationale edges", "other edges"),
            )
    else:
        sys.stdout.write(text)
    return EXIT_OK


def augment_corpus(
    graphs: list[Graph],
    params: dict,
    cfg: TrainConfig,
    r_aug: float,
    lam: float,
    r_add: float,
    seed: int,
    lam_policy: str = "fixed",
) -> tuple[list[eda.AugmentedGraph], int]:
    """Augmented graphs for ``round(r_aug * len(graphs))`` planned pairs, plus the skip count."""
    rng = np.random.default_rng([seed, 11])
    pairs = eda.plan_augmentation(len(graphs), r_aug, rng)
    scfg = prse.ConcreteSampleConfig(cfg.temperature)
    masks = _masks(graphs, params)
    splits: dict[int, object] = {}

    def split_of(k):
        # one rationale draw per graph, shared by every pair it takes part in
        if k not in splits:
            splits[k] = prse.sample_rationale(graphs[k], masks[k], scfg, np.random.default_rng([seed, 12, k]))[0]
        return splits[k]

    out, skipped = [], 0
    base_id = max(g.graph_id for g in graphs) + 1
    for n, (i, j) in enumerate(pairs.tolist()):
        lam_ij = eda.lambda_for_pair(lam_policy, lam, rng)
        try:
            aug, _, _ = eda.augment_pair(split_of(i), split_of(j), masks[i], masks[j], lam_ij, r_add, scfg, rng, graph_id=base_id + n)
        except eda.DegenerateMix as exc:
            skipped += 1
            log.warning("skipping pair (%d, %d): %s", graphs[i].graph_id, graphs[j].graph_id, exc)
            continue
        out.append(aug)
    return out, skipped


def _masks(graphs: list[Graph], params: dict, batch_size: int = 128) -> list[np.ndarray]:
    out = []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        batch = collate(chunk)
        m = encoder.mask_head(encoder.gin_encode(batch, None, params), batch.edges, params).data
        eo = batch.edge_offsets
        out.extend(m[eo[k]:eo[k + 1]].copy() for k in range(len(chunk)))
    return out


def _augmented_record_extra(aug: eda.AugmentedGraph) -> dict:
    n_r = len(aug.rationale_edge_ids)
    n_e = len(aug.environment_edge_ids)
    prov = dict(aug.provenance)
    prov["environment_edges"] = list(range(n_r, n_r + n_e))
    return {"provenance": prov}


def cmd_augment(args) -> int:
    arch, params, cfg = _load_model(args.checkpoint)
    graphs, _ = _load_corpus(args.data)
    graphs = _select_split(graphs, args.split or _default_split(graphs, "train"))
    _check_features(arch, graphs)
    if not 0.0 <= args.r_aug <= 1.0 or not 0.0 <= args.lam <= 1.0:
        raise UsageError("--r-aug and --lambda must lie in [0, 1]")
    if not 0.0 < args.r_add <= 1.0:
        raise UsageError("--r-add must lie in (0, 1]")
    augmented, skipped = augment_corpus(graphs, params, cfg, args.r_aug, args.lam, args.r_add, args.seed)
    write_jsonl(Path(args.out), [a.graph for a in augmented], [_augmented_record_extra(a) for a in augmented])
    print(f"wrote {len(augmented)} augmented graphs to {args.out} ({skipped} pairs skipped)")
    return EXIT_OK


def environment_embeddings(
    graphs: list[Graph],
    params: dict,
    env_edges: list[np.ndarray | None] | None = None,
) -> np.ndarray:
    """Mean-pooled GNN_1 embedding of each graph's environment part.

    ``env_edges[k]`` fixes graph k's environment edges; otherwise the
    hard-thresholded mask decides.  Graphs without environment edges are
    dropped.
    """
    masks = _masks(graphs, params)
    parts = []
    for k, g in enumerate(graphs):
        chosen = env_edges[k] if env_edges is not None and env_edges[k] is not None else None
        if chosen is None:
            split = partition(g, masks[k] > 0.5)
            part = eda.environment_part(split)
        else:
            chosen = np.asarray(chosen, dtype=np.int64)
            part = Part(g, np.unique(g.edges[chosen].reshape(-1)), chosen)
        if part.num_edges:
            parts.append(part)
    if not parts:
        raise GraphError("no graph has a non-empty environment")
    batch = collate(parts)
    return encoder.readout(encoder.gin_encode(batch, None, params), batch).data


def cmd_diversity(args) -> int:
    arch, params, cfg = _load_model(args.checkpoint)
    graphs, _ = _load_corpus(args.data)
    _check_features(arch, graphs)
    report: dict = {"data": str(args.data)}
    base_emb = environment_embeddings(graphs, params)
    bw = metrics.auto_bandwidth(base_emb) if args.bandwidth is None else args.bandwidth
    count, assign, _ = metrics.mean_shift_count(base_emb, bandwidth=bw)
    report["bandwidth"] = bw
    report["env_category_count"] = count
    report["env_graphs"] = int(len(base_emb))
    groups = {"data": (base_emb, assign)}
    if args.compare:
        other, records = _load_corpus(args.compare)
        _check_features(arch, other)
        env = [r.get("provenance", {}).get("environment_edges") for r in records]
        cmp_emb = environment_embeddings(other, params, env)
        c_count, c_assign, _ = metrics.mean_shift_count(cmp_emb, bandwidth=bw)
        report["compare"] = str(args.compare)
        report["compare_env_category_count"] = c_count
        report["compare_env_graphs"] = int(len(cmp_emb))
        report["js_distance"] = metrics.distribution_distance(graphs, other)
        groups["compare"] = (cmp_emb, c_assign)
    if args.history:
        hist = trainer.read_history(args.history)
        series = [[row["epoch"], row["aug_distance"]] for row in hist if np.isfinite(row["aug_distance"])]
        report["distance_series"] = series
    # the descriptor JS is bounded by ln 2; the scaled copy suits reports that
    # quote it in thousandths
    if "js_distance" in report:
        report["js_distance_x1e3"] = report["js_distance"] * 1e3
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        _write_text(out, text)
        if not args.no_figures:
            plotting.plot_clusters(groups, out.with_name(out.stem + "_clusters.png"))
            if report.get("distance_series"):
                s = np.array(report["distance_series"])
                plotting.plot_distance_series(s[:, 0], s[:, 1], out.with_name(out.stem + "_distance.png"))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    graphs, _ = spmotif.generate_spmotif(spmotif.SpmotifConfig(n_train=2, n_val=0, n_test=0, seed=args.seed))
    # r_aug = 0.5 so the two-graph batch plans exactly one augmented pair
    cfg = TrainConfig(hidden=args.hidden, layers=args.layers, r_aug=0.5, seed=args.seed)
    start = time.perf_counter()
    worst, groups = trainer.gradient_check(graphs, cfg, args.seed, max_coords=args.max_coords)
    elapsed = time.perf_counter() - start
    ok = bool(worst < args.tolerance)
    report = {
        "max_relative_error": float(worst),
        "tolerance": args.tolerance,
        "passed": ok,
        "per_parameter": groups,
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text(Path(args.out), text)
    for name, err in groups.items():
        print(f"{name:12s} {err:.3e}")
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'}, {elapsed:.1f}s)")
    return EXIT_OK if ok else EXIT_FAILED


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="grbe", description="GRBE graph rationalization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-spmotif", help="generate a Spurious-Motifs corpus")
    g.add_argument("--bias", type=float, default=0.9)
    g.add_argument("--n-train", type=int, default=1500)
    g.add_argument("--n-val", type=int, default=500)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--base-scale", type=float, default=1.0)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_spmotif)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    for name, typ in TRAIN_FLAGS.items():
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    t.add_argument("--lambda", dest="lam", type=float, default=None)
    t.add_argument("--lr", dest="learning_rate", type=float, default=None)
    t.add_argument("--erm", action="store_true", help="plain full-graph GIN baseline")
    t.add_argument("--no-normalize", action="store_true", help="InfoNCE on raw embeddings")
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", help="train/val/test/all (default: test when present)")
    e.add_argument("--out")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("augment", help="dump augmented graphs with provenance")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--r-aug", type=float, default=0.2)
    a.add_argument("--lambda", dest="lam", type=float, default=0.5)
    a.add_argument("--r-add", type=float, default=0.1)
    a.add_argument("--split", help="source split (default: train when present)")
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_augment)

    d = sub.add_parser("diversity", help="environment category count and corpus distances")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--compare")
    d.add_argument("--history")
    d.add_argument("--bandwidth", type=float)
    d.add_argument("--out")
    d.add_argument("--no-figures", action="store_true")
    d.set_defaults(func=cmd_diversity)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--max-coords", type=int, default=20)
    c.add_argument("--hidden", type=int, default=8)
    c.add_argument("--layers", type=int, default=2)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericDivergence as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (GraphError, CheckpointError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
