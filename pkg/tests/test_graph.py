import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grbe.graph import (
    Graph, GraphError, Part, collate, merge, merge_parts, nodes_of, partition,
    perturb_edges, read_jsonl, write_jsonl,
)

from conftest import random_graph


def path_graph(n=5, **kw):
    return Graph(node_count=n, edges=[(k, k + 1) for k in range(n - 1)], x=np.arange(2.0 * n).reshape(n, 2), **kw)


def test_graph_validates_inputs():
    with pytest.raises(GraphError):
        Graph(node_count=2, edges=[(0, 2)], x=np.zeros((2, 1)))
    with pytest.raises(GraphError):
        Graph(node_count=2, edges=[(1, 1)], x=np.zeros((2, 1)))
    with pytest.raises(GraphError):
        Graph(node_count=2, edges=[(0, 1), (1, 0)], x=np.zeros((2, 1)))
    with pytest.raises(GraphError):
        Graph(node_count=2, edges=[(0, 1)], x=np.zeros((3, 1)))
    with pytest.raises(GraphError):
        Graph(node_count=2, edges=[(0, 1)], x=np.zeros((2, 1)), gt_rationale=[1, 0])


def test_edges_are_oriented_and_frozen():
    g = Graph(node_count=3, edges=[(2, 0), (1, 2)], x=np.zeros((3, 1)))
    assert g.canonical_edges() == [(0, 2), (1, 2)]
    with pytest.raises(ValueError):
        g.edges[0, 0] = 1


def test_partition_complementarity():
    g = path_graph(5)
    split = partition(g, [1, 1, 0, 0])
    assert split.rationale_edges.tolist() == [0, 1]
    assert split.environment_edges.tolist() == [2, 3]
    assert split.rationale_nodes.tolist() == [0, 1, 2]
    assert split.environment_nodes.tolist() == [3, 4]
    assert split.cut_edges.tolist() == [2]


def test_partition_all_rationale():
    g = path_graph(4)
    split = partition(g, np.ones(3, bool))
    assert len(split.environment_edges) == 0
    assert split.rationale_part().to_graph().canonical_edges() == g.canonical_edges()


def test_partition_rejects_bad_indicator():
    g = path_graph(4)
    with pytest.raises(GraphError):
        partition(g, [1, 0])
    with pytest.raises(GraphError):
        partition(g, [1, 0, 1], [0.5, 1.5, 0.2])


def test_partition_with_gt_recovers_house_motif(small_corpus):
    from grbe import spmotif
    graphs, _ = small_corpus
    g = next(g for g in graphs if g.label == spmotif.MOTIFS.index("house"))
    split = partition(g, g.gt_rationale)
    sub = split.rationale_part().to_graph()
    assert sub.node_count == 5 and sub.num_edges == 6
    assert sorted(sub.degrees().tolist()) == [2, 2, 2, 3, 3]


def test_merge_cardinality_and_label():
    rng = np.random.default_rng(0)
    a = random_graph(rng, n=8, p=0.5, label=2, gid=1)
    b = random_graph(rng, n=9, p=0.5, label=0, gid=2)
    ra = Part(a, nodes_of(a, np.arange(5)), np.arange(5))
    eb = Part(b, nodes_of(b, np.arange(7)), np.arange(7))
    bridges = [(ra.nodes[0], eb.nodes[0]), (ra.nodes[1], eb.nodes[2])]
    g = merge(ra, eb, bridges)
    assert g.num_edges == 14
    assert g.label == 2
    assert g.node_count == ra.num_nodes + eb.num_nodes


def test_merge_without_bridges_is_disconnected():
    g1, g2 = path_graph(3, label=1), path_graph(4)
    g = merge(Part(g1, [0, 1, 2], [0, 1]), Part(g2, [0, 1, 2, 3], [0, 1, 2]))
    assert g.num_edges == 5
    assert not np.any((g.edges[:, 0] < 3) & (g.edges[:, 1] >= 3))


def test_merge_rejects_foreign_bridge_endpoint():
    g1, g2 = path_graph(3), path_graph(4)
    with pytest.raises(GraphError):
        merge(Part(g1, [0, 1], [0]), Part(g2, [0, 1], [0]), [(2, 0)])


def roundtrip_edges(g: Graph, hard: np.ndarray) -> set:
    split = partition(g, hard)
    r = split.closed_rationale_part()
    e = split.environment_part()
    merged = merge(r, e, split.cut_pairs()) if r.num_edges else merge_parts([e])[0]
    # map merged node numbering back to the parent
    back = np.concatenate([r.nodes, e.nodes]) if r.num_edges else e.nodes
    return {tuple(sorted(back[list(edge)].tolist())) for edge in merged.edges}


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_partition_merge_roundtrip(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n=int(rng.integers(2, 12)), p=float(rng.uniform(0.2, 0.8)))
    hard = rng.random(g.num_edges) < rng.random()
    if not hard.any():
        hard[0] = True
    assert roundtrip_edges(g, hard) == set(g.canonical_edges())


def test_perturb_edges_boundaries(rng):
    ids = np.arange(20)
    np.testing.assert_array_equal(perturb_edges(ids, 1.0, rng), ids)
    assert len(perturb_edges(ids, 0.0, rng)) == 0
    with pytest.raises(GraphError):
        perturb_edges(ids, 1.5, rng)


def test_perturb_edges_binomial_mean():
    rng = np.random.default_rng(7)
    kept = np.array([len(perturb_edges(np.arange(20), 0.5, rng)) for _ in range(10_000)])
    # standard error of the mean of 10^4 Binomial(20, 0.5) counts
    sigma = np.sqrt(20 * 0.25) / np.sqrt(len(kept))
    assert abs(kept.mean() - 10.0) < 3 * sigma
    assert kept.std() == pytest.approx(np.sqrt(5.0), rel=0.05)


def test_collate_offsets_and_pooling():
    g1, g2 = path_graph(3), path_graph(2)
    b = collate([g1, Part(g2, [0, 1], [0])])
    assert b.num_graphs == 2
    assert b.node_offsets.tolist() == [0, 3, 5]
    assert b.edge_offsets.tolist() == [0, 2, 3]
    assert b.edges[-1].tolist() == [3, 4]
    pool = b.pooling_matrix().toarray()
    np.testing.assert_allclose(pool.sum(axis=1), 1.0)
    with pytest.raises(GraphError):
        b.pooling_matrix(np.array([0, 0, 0, 1, 1.0]))


def test_jsonl_roundtrip(tmp_path, small_corpus):
    graphs, _ = small_corpus
    path = tmp_path / "c.jsonl"
    write_jsonl(path, graphs[:5], [{"note": k} for k in range(5)])
    back = read_jsonl(path)
    assert not (tmp_path / "c.jsonl.partial").exists()
    for a, b in zip(graphs[:5], back):
        assert a.to_record() == b.to_record()
    assert json.loads(path.read_text().splitlines()[2])["note"] == 2


def test_jsonl_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": 0, "n": 2, "edges": [[0, 1]], "x": [[0], [1]], "y": 0}\n{"id": 1, "n": 1}\n')
    with pytest.raises(GraphError, match=":2:"):
        read_jsonl(path)
