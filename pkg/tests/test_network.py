import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rivercast.network import (
    GaugeSet, RiverGraph, StaticFeatureTable, adjacency_normalized, chain_graph, generate_network,
    graph_from_dict, graph_to_dict, load_graph, load_mapping, refine_network, save_graph, save_mapping,
    select_gauge_reaches, split_gauges,
)


def test_single_reach_network():
    g, f = generate_network(1, 0.3, 7)
    assert g.n_reaches == 1 and g.edges == () and list(g.degree) == [1]
    np.testing.assert_array_equal(adjacency_normalized(g), [[1.0]])


def test_zero_reaches_rejected():
    with pytest.raises(ValueError):
        generate_network(0, 0.3, 7)


def test_generation_is_deterministic():
    a = generate_network(50, 0.3, 7)
    b = generate_network(50, 0.3, 7)
    assert a[0].edges == b[0].edges
    np.testing.assert_array_equal(a[1].matrix(), b[1].matrix())


def test_edge_scan_200():
    g, f = generate_network(200, 0.3, 7)
    assert len(g.edges) == 199
    for j, i in g.edges:
        assert f.uparea[i] >= f.uparea[j]
        assert f.elevtn[j] > f.elevtn[i]
    f.validate(g)
    assert f.matrix().shape == (200, 20)


def test_uparea_accumulates():
    g, f = generate_network(120, 0.5, 3)
    for i in range(g.n_reaches):
        expected = f.ctarea[i] + sum(f.uparea[j] for j in g.upstream_of(i))
        assert f.uparea[i] == pytest.approx(expected, rel=1e-12)


def test_chain_adjacency():
    a = adjacency_normalized(chain_graph(2))
    np.testing.assert_array_equal(a, [[1.0, 0.0], [0.5, 0.5]])


def test_confluence_adjacency():
    g = RiverGraph.from_edges(3, [(0, 2), (1, 2)])
    np.testing.assert_allclose(adjacency_normalized(g)[2], [1 / 3, 1 / 3, 1 / 3], rtol=1e-15)
    assert list(g.degree) == [1, 1, 3]


def test_sparse_and_dense_agree():
    g, _ = generate_network(40, 0.4, 1)
    np.testing.assert_array_equal(adjacency_normalized(g, sparse_format=True).toarray(), adjacency_normalized(g))


@pytest.mark.parametrize("edges, msg", [
    ([(0, 1), (1, 0)], "cycle"),
    ([(0, 1), (0, 2)], "more than one downstream"),
    ([(1, 1)], "self-loop"),
    ([(0, 5)], "outside"),
])
def test_invalid_graphs(edges, msg):
    with pytest.raises(ValueError, match=msg):
        RiverGraph.from_edges(3, edges)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 120), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_generated_graph_invariants(n, p, seed):
    g, f = generate_network(n, p, seed)
    assert g.is_topological()
    counts = np.bincount([j for j, _ in g.edges], minlength=n) if g.edges else np.zeros(n)
    assert counts.max() <= 1
    indeg = np.bincount([i for _, i in g.edges], minlength=n) if g.edges else np.zeros(n)
    np.testing.assert_array_equal(g.degree, 1 + indeg)
    rows = adjacency_normalized(g, sparse_format=True).sum(axis=1)
    np.testing.assert_allclose(np.asarray(rows).ravel(), 1.0, atol=1e-12)
    f.validate(g)


def test_refine_single_node():
    g, f = generate_network(1, 0.3, 7)
    fg, ff, mapping = refine_network(g, f, 2)
    assert fg.n_reaches == 2 and fg.edges == ((0, 1),)
    np.testing.assert_allclose(ff.rivlen, f.rivlen[0] / 2)
    assert mapping == {0: [0, 1]}


def test_refine_k3_structure_and_length():
    g, f = generate_network(60, 0.3, 2)
    fg, ff, mapping = refine_network(g, f, 3)
    assert fg.n_reaches == 180
    assert np.bincount([j for j, _ in fg.edges], minlength=180).max() <= 1
    assert fg.is_topological()
    for c, ids in mapping.items():
        assert ff.rivlen[ids].sum() == pytest.approx(f.rivlen[c], rel=1e-9)
    ff.validate(fg)
    for j, i in fg.edges:
        assert ff.elevtn[j] > ff.elevtn[i]


def test_refine_chain_order():
    g = chain_graph(2)
    _, f = generate_network(2, 0.0, 0)
    fg, _, _ = refine_network(g, f, 2)
    assert fg.is_topological()


def test_refine_rejects_k1():
    g, f = generate_network(3, 0.3, 0)
    with pytest.raises(ValueError):
        refine_network(g, f, 1)


def test_split_gauges_basic():
    g, _ = generate_network(20, 0.3, 0)
    (gs,) = split_gauges(g, range(10), [0.5], seed=1)
    assert len(gs.supervised) == 5 and len(gs.unsupervised) == 5
    assert not gs.supervised & gs.unsupervised


def test_split_gauges_full_ratio_has_no_unsupervised():
    g, _ = generate_network(20, 0.3, 0)
    (gs,) = split_gauges(g, range(10), [1.0])
    assert gs.unsupervised == frozenset()


def test_split_gauges_errors():
    g, _ = generate_network(20, 0.3, 0)
    with pytest.raises(ValueError):
        split_gauges(g, [], [0.5])
    with pytest.raises(ValueError):
        split_gauges(g, range(5), [0.5, 0.25])
    with pytest.raises(ValueError):
        split_gauges(g, [99], [0.5])


def test_split_gauges_nesting_100_seeds():
    g, _ = generate_network(60, 0.3, 0)
    ratios = [0.1, 0.25, 0.5, 0.75, 0.9, 1.0]
    for seed in range(100):
        sets = split_gauges(g, range(0, 60, 2), ratios, seed)
        for a, b in zip(sets, sets[1:]):
            assert a.supervised <= b.supervised
        assert all(s.all == frozenset(range(0, 60, 2)) for s in sets)


def test_gauge_set_disjoint():
    with pytest.raises(ValueError):
        GaugeSet({1, 2}, {2, 3})


def test_select_gauges_deterministic():
    g, f = generate_network(100, 0.3, 0)
    a = select_gauge_reaches(g, f, 40, 3)
    assert a == select_gauge_reaches(g, f, 40, 3) and len(set(a)) == 40


def test_graph_json_roundtrip(tmp_path):
    g, f = generate_network(30, 0.3, 4)
    save_graph(tmp_path / "graph.json", g, f)
    g2, f2 = load_graph(tmp_path / "graph.json")
    assert g2.edges == g.edges
    np.testing.assert_array_equal(f2.matrix(), f.matrix())
    d = graph_to_dict(g, f)
    assert set(d) == {"n_reaches", "edges", "static"} and len(d["static"]["fldhgt"][0]) == 10
    d["n_reaches"] = 31
    with pytest.raises(ValueError):
        graph_from_dict(d)
    _, _, mapping = refine_network(g, f, 2)
    save_mapping(tmp_path / "coarse_to_fine.json", mapping)
    assert load_mapping(tmp_path / "coarse_to_fine.json") == mapping


def test_static_table_is_read_only():
    _, f = generate_network(5, 0.3, 0)
    with pytest.raises(ValueError):
        f.width[0] = 1.0


def test_static_table_validation():
    _, f = generate_network(5, 0.3, 0)
    bad = StaticFeatureTable(**{**{k: getattr(f, k) for k in f.__dataclass_fields__},
                                "manning_n": np.full(5, 0.5)})
    with pytest.raises(ValueError, match="manning_n"):
        bad.validate()
