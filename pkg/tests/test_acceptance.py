"""Acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL: ...`` line (collected
again in the terminal summary) and then asserts.  Criteria 7-9 train nine
models on the desk-scale Spmotif-0.9 corpus and are marked slow.
"""

import math
import time

import numpy as np
import pytest

from grbe import cli, eda, metrics, prse, spmotif, trainer
from grbe.autodiff import Tensor
from grbe.graph import Graph, merge, merge_parts, partition
from grbe.prse import ConcreteSampleConfig

from conftest import random_graph

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def within_3_sigma(rate: float, p: float, n: int) -> bool:
    sigma = math.sqrt(p * (1.0 - p) / n)
    return abs(rate - p) <= 3.0 * sigma if sigma > 0 else rate == p


# 1 -------------------------------------------------------------------------


def test_criterion_1_gradient_check():
    graphs, _ = spmotif.generate_spmotif(spmotif.SpmotifConfig(n_train=2, n_val=0, n_test=0, seed=0))
    cfg = trainer.TrainConfig(r_aug=0.5, seed=0)
    start = time.perf_counter()
    worst, _ = trainer.gradient_check(graphs, cfg, seed=0, max_coords=20)
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-4 and elapsed < 60, f"max relative error {worst:.2e} in {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------


def long_path(n_edges: int, label: int = 0, gid: int = 0) -> Graph:
    return Graph(n_edges + 1, np.stack([np.arange(n_edges), np.arange(1, n_edges + 1)], 1), np.zeros((n_edges + 1, 1)), label, graph_id=gid)


def test_criterion_2_sampling_calibration():
    draws = 100_000
    rng = np.random.default_rng(0)
    g = long_path(draws)
    cfg = ConcreteSampleConfig()
    failures = []
    for m in (0.1, 0.3, 0.5, 0.7, 0.9):
        split, _ = prse.sample_rationale(g, np.full(draws, m), cfg, rng)
        rate = split.rationale_edges.size / draws
        if not within_3_sigma(rate, m, draws):
            failures.append(f"M={m}: {rate:.4f}")

    # every edge of both graphs is environment; M_i = 0.3, M_j = 0.6
    half = draws // 2
    gi, gj = long_path(half, 0, 0), long_path(half, 1, 1)
    si = partition(gi, np.zeros(half, bool))
    sj = partition(gj, np.zeros(half, bool))
    for lam in (0.0, 0.5, 1.0):
        spec = eda.mix_environments(si, sj, lam, np.full(half, 0.3), np.full(half, 0.6))
        hits = np.zeros(2)
        for _ in range(2):
            sampled, _ = eda.sample_mixed_environment(spec, cfg, rng)
            hits += np.bincount(spec.block_of_edge[sampled], minlength=2)
        for block, p in ((0, lam * 0.7), (1, (1.0 - lam) * 0.4)):
            rate = hits[block] / draws
            if not within_3_sigma(rate, p, draws):
                failures.append(f"lambda={lam} block {block}: {rate:.4f} vs {p:.4f}")
    report(2, not failures, "all rates within 3 sigma" if not failures else "; ".join(failures))


# 3 -------------------------------------------------------------------------


def canonical(edges) -> set:
    return {tuple(sorted(e)) for e in np.asarray(edges).tolist()}


def test_criterion_3_structural_invariants():
    trials = 10_000
    rng = np.random.default_rng(3)
    bad = {"round-trip": 0, "block-diagonal": 0, "label": 0, "bridges": 0}
    degenerate = 0
    for t in range(trials):
        g = random_graph(rng, n=int(rng.integers(2, 12)), p=float(rng.uniform(0.2, 0.8)), label=int(rng.integers(0, 3)), gid=2 * t)
        hard = rng.random(g.num_edges) < rng.random()
        if not hard.any():
            hard[0] = True
        split = partition(g, hard)
        r, e = split.closed_rationale_part(), split.environment_part()
        merged = merge(r, e, split.cut_pairs()) if e.num_nodes else merge_parts([r])[0]
        back = np.concatenate([r.nodes, e.nodes]) if e.num_nodes else r.nodes
        if canonical(back[merged.edges]) != canonical(g.edges) or merged.label != g.label:
            bad["round-trip"] += 1

        gj = random_graph(rng, n=int(rng.integers(3, 12)), p=0.5, label=int(rng.integers(0, 3)), gid=2 * t + 1)
        sj = partition(gj, rng.random(gj.num_edges) < 0.4)
        lam = float(rng.random())
        r_add = float(rng.uniform(0.05, 0.5))
        try:
            aug, spec, _ = eda.augment_pair(split, sj, rng.random(g.num_edges), rng.random(gj.num_edges), lam, r_add, ConcreteSampleConfig(), rng)
        except eda.DegenerateMix:
            degenerate += 1
            continue
        n_i = spec.blocks[0].num_nodes
        side = spec.extended_edges >= n_i
        if not (np.all(side[:, 0] == side[:, 1]) and np.all(side[:, 0] == (spec.block_of_edge == 1))):
            bad["block-diagonal"] += 1
        if aug.graph.label != g.label:
            bad["label"] += 1
        if aug.num_bridges != round(r_add * (g.num_edges + gj.num_edges)):
            bad["bridges"] += 1
    ok = not any(bad.values())
    report(3, ok, f"{trials} trials, violations {bad}, {degenerate} degenerate pairs skipped")


# 4 -------------------------------------------------------------------------


def test_criterion_4_infonce():
    errors = []
    for n in (2, 8, 32):
        e = Tensor(np.tile(np.array([[0.3, -1.2, 0.5]]), (n, 1)))
        errors.append(abs(prse.infonce(e, e, 0.5).item() + math.log(n)))
    rng = np.random.default_rng(4)
    worst = -math.inf
    for _ in range(1000):
        n, d = int(rng.integers(2, 40)), int(rng.integers(1, 16))
        a, b = Tensor(rng.normal(size=(n, d)) * 5), Tensor(rng.normal(size=(n, d)) * 5)
        worst = max(worst, prse.infonce(a, b, float(rng.uniform(0.05, 2.0)), normalize=bool(rng.random() < 0.5)).item())
    ok = max(errors) < 1e-9 and worst <= 0.0
    report(4, ok, f"closed-form error {max(errors):.1e}, max estimate on random batches {worst:.3e}")


# 5 -------------------------------------------------------------------------


def pairwise_auc(scores, flags) -> float:
    pos, neg = scores[flags], scores[~flags]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return total / (len(pos) * len(neg))


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(5)
    auc_err = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 30))
        flags = rng.random(n) < 0.4
        flags[0], flags[1] = True, False
        scores = rng.integers(0, 5, n) / 4.0 if rng.random() < 0.5 else rng.random(n)
        auc_err = max(auc_err, abs(metrics.roc_auc(scores, flags) - pairwise_auc(scores, flags)))
    p = rng.dirichlet(np.ones(6))
    q = rng.dirichlet(np.ones(6))
    js_self = metrics.js_divergence(p, p)
    js_disjoint = metrics.js_divergence([1.0, 0.0], [0.0, 1.0])
    js_sym = abs(metrics.js_divergence(p, q) - metrics.js_divergence(q, p))
    bw = 0.5
    blobs = np.concatenate([rng.normal(0, 0.05, (50, 2)), rng.normal(0, 0.05, (50, 2)) + 100 * bw])
    count, _, _ = metrics.mean_shift_count(blobs, bandwidth=bw)
    ok = auc_err <= 1e-12 and js_self == 0.0 and abs(js_disjoint - math.log(2)) <= 1e-12 and js_sym <= 1e-12 and count == 2
    report(5, ok, f"AUC error {auc_err:.1e}, JS(p,p)={js_self}, JS disjoint - ln2 = {js_disjoint - math.log(2):.1e}, symmetry {js_sym:.1e}, clusters {count}")


# 6 -------------------------------------------------------------------------


def test_criterion_6_spmotif_calibration():
    n = 10_000
    graphs, bases = spmotif.generate_spmotif(spmotif.SpmotifConfig(bias=0.9, n_train=n, n_val=0, n_test=n, seed=0))
    stats = spmotif.bias_statistics(graphs, bases)
    tr, te = stats["train"], stats["test"]
    checks = [within_3_sigma(tr["matched_base_frequency"], 0.9, n), within_3_sigma(te["matched_base_frequency"], 1 / 3, n)]
    checks += [within_3_sigma(f, 1 / 3, n) for f in tr["class_frequency"] + te["class_frequency"]]
    report(6, all(checks), f"matched base train {tr['matched_base_frequency']:.4f}, test {te['matched_base_frequency']:.4f}, "
           f"class balance {[round(f, 4) for f in tr['class_frequency']]}")


# 7-9 -----------------------------------------------------------------------

SEEDS = (0, 1, 2)
DESK = dict(hidden=32, layers=3, epochs=50, alpha=0.5, beta=0.1, gamma=0.5, r_aug=0.2, r_s=0.7)
VARIANTS = {
    "grbe": DESK,
    "erm": {**DESK, "alpha": 0.0, "beta": 0.0, "gamma": 0.0, "r_aug": 0.0, "erm": True},
    "no_prse": {**DESK, "beta": 0.0},
}
_RUNS: dict = {}


def desk_corpus(seed: int):
    graphs, _ = spmotif.generate_spmotif(spmotif.SpmotifConfig(bias=0.9, n_train=1500, n_val=500, n_test=500, seed=seed))
    return [[g for g in graphs if g.split == s] for s in ("train", "val", "test")]


def desk_run(variant: str, seed: int) -> dict:
    key = (variant, seed)
    if key not in _RUNS:
        train, val, test = desk_corpus(seed)
        cfg = trainer.TrainConfig(seed=seed, **VARIANTS[variant])
        start = time.process_time()
        _, params, _ = trainer.train(train, cfg, val)
        elapsed = time.process_time() - start
        rep = trainer.evaluate(params, test, cfg)
        _RUNS[key] = {"accuracy": rep.accuracy, "auc": rep.rationale_auc, "seconds": elapsed, "params": params, "cfg": cfg, "train": train}
    return _RUNS[key]


@pytest.mark.slow
def test_criterion_7_accuracy_over_erm():
    grbe = [desk_run("grbe", s) for s in SEEDS]
    erm = [desk_run("erm", s) for s in SEEDS]
    acc_g = float(np.median([r["accuracy"] for r in grbe]))
    acc_e = float(np.median([r["accuracy"] for r in erm]))
    slowest = max(r["seconds"] for r in grbe + erm)
    ok = acc_g - acc_e >= 0.05 and slowest <= 15 * 60
    report(7, ok, f"median test accuracy GRBE {acc_g:.3f} vs ERM {acc_e:.3f} (gap {100 * (acc_g - acc_e):+.1f} points), "
           f"slowest run {slowest:.0f}s CPU")


@pytest.mark.slow
def test_criterion_8_rationale_auc():
    grbe = [desk_run("grbe", s)["auc"] for s in SEEDS]
    ablated = [desk_run("no_prse", s)["auc"] for s in SEEDS]
    auc_g, auc_a = float(np.median(grbe)), float(np.median(ablated))
    ok = auc_g >= 0.70 and auc_g - auc_a >= 0.03
    report(8, ok, f"median rationale AUC GRBE {auc_g:.3f} vs beta=0 {auc_a:.3f}")


@pytest.mark.slow
def test_criterion_9_environment_diversity():
    run = desk_run("grbe", 0)
    train, params, cfg = run["train"], run["params"], run["cfg"]

    def env_embeddings(lam):
        augmented, _ = cli.augment_corpus(train, params, cfg, r_aug=0.2, lam=lam, r_add=cfg.r_add, seed=9)
        graphs = [a.graph for a in augmented]
        n_r = [len(a.rationale_edge_ids) for a in augmented]
        env = [np.arange(k, k + len(a.environment_edge_ids)) for k, a in zip(n_r, augmented)]
        return cli.environment_embeddings(graphs, params, env)

    # lambda = 0 keeps only graph j's environment: a plain swap without mixup
    swapped = env_embeddings(0.0)
    mixed = env_embeddings(cfg.lam)
    bw = metrics.auto_bandwidth(swapped)
    n_swap = metrics.mean_shift_count(swapped, bandwidth=bw)[0]
    n_mixed = metrics.mean_shift_count(mixed, bandwidth=bw)[0]
    report(9, n_mixed > n_swap, f"environment categories: mixup {n_mixed} vs swap {n_swap} (bandwidth {bw:.4g})")


# 10 ------------------------------------------------------------------------


def pipeline(root) -> dict:
    data, run, rep = root / "c.jsonl", root / "run", root / "report.json"
    assert cli.main(["gen-spmotif", "--n-train", "120", "--n-val", "40", "--n-test", "40", "--seed", "10", "--out", str(data)]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(run), "--epochs", "3", "--hidden", "16", "--seed", "10"]) == 0
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data), "--out", str(rep)]) == 0
    files = [data, data.with_name("c.jsonl.meta.json"), rep, *sorted(run.iterdir())]
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in files}


def test_criterion_10_determinism(tmp_path):
    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = a.keys() == b.keys() and not differing
    report(10, ok, f"{len(a)} artifacts compared, differing: {differing or 'none'}")
