import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vgraph.graph import (
    CommunitySet,
    Graph,
    NoiseDistribution,
    ParseError,
    generate_hierarchical_sbm,
    generate_sbm,
    jaccard_coefficient,
    jaccard_weights,
    load_communities,
    load_edge_list,
    sample_negatives,
    write_communities,
    write_edge_list,
)


def parse(text):
    return load_edge_list(io.StringIO(text))


edge_lists = st.lists(
    st.tuples(st.integers(0, 12), st.integers(0, 12)), min_size=1, max_size=40
)


def _text(pairs):
    return "".join(f"n{a} n{b}\n" for a, b in pairs)


# -- parsing -----------------------------------------------------------------


def test_parse_simple():
    g = parse("0 1\n1 2\n")
    assert g.node_count == 3
    assert g.edges.tolist() == [[0, 1], [1, 2]]
    assert g.labels == ("0", "1", "2")


def test_self_loop_dropped_and_counted():
    g = parse("0 0\n0 1\n")
    assert g.edges.tolist() == [[0, 1]]
    assert g.self_loops_dropped == 1


def test_duplicates_and_comments():
    g = parse("# header\n\na b\nb a\na b\n  \nb c\n")
    assert g.edge_count == 2
    assert g.labels == ("a", "b", "c")


@pytest.mark.parametrize("bad", ["0 1 2\n", "0\n", "0 1\n7\n"])
def test_malformed_line_reports_line_number(bad):
    with pytest.raises(ParseError, match="line"):
        parse(bad)


def test_labels_in_first_seen_order():
    g = parse("42 7\n7 1000\n")
    assert g.labels == ("42", "7", "1000")
    assert g.index_of("1000") == 2


def test_neighbor_index_out_of_range():
    g = parse("0 1\n")
    with pytest.raises(IndexError):
        g.neighbors(5)


@given(edge_lists)
def test_adjacency_invariants(pairs):
    g = parse(_text(pairs))
    for w in range(g.node_count):
        nbrs = g.neighbors(w)
        assert list(nbrs) == sorted(set(nbrs.tolist()))
        assert w not in nbrs
        for c in nbrs:
            assert w in g.neighbors(int(c))
    assert g.edge_count * 2 == g.degrees.sum()


@given(edge_lists)
def test_round_trip(pairs):
    g = parse(_text(pairs))
    buf = io.StringIO()
    write_edge_list(g, buf)
    h = parse(buf.getvalue())
    assert h.node_count == g.node_count
    as_set = lambda gr: {frozenset((gr.labels[a], gr.labels[b])) for a, b in gr.edges.tolist()}
    assert as_set(g) == as_set(h)


# -- jaccard -----------------------------------------------------------------


def test_jaccard_triangle():
    g = parse("a b\nb c\na c\n")
    assert jaccard_coefficient(g, 0, 1) == pytest.approx(1 / 3, abs=1e-15)


def test_jaccard_path():
    g = parse("a b\nb c\n")
    assert jaccard_coefficient(g, 0, 1) == 0.0


def test_jaccard_identical_neighborhoods():
    g = parse("a x\na y\nb x\nb y\n")
    assert jaccard_coefficient(g, g.index_of("a"), g.index_of("b")) == 1.0


def test_jaccard_out_of_range():
    with pytest.raises(IndexError):
        jaccard_coefficient(parse("0 1\n"), 0, 9)


@given(edge_lists)
def test_jaccard_symmetric_and_vectorized(pairs):
    g = parse(_text(pairs))
    all_pairs = np.array([(w, c) for w in range(g.node_count) for c in range(g.node_count)])
    fast = jaccard_weights(g, all_pairs)
    for (w, c), f in zip(all_pairs.tolist(), fast):
        a = jaccard_coefficient(g, w, c)
        assert a == jaccard_coefficient(g, c, w)
        assert 0.0 <= a <= 1.0
        assert f == pytest.approx(a, abs=1e-15)


# -- negatives ---------------------------------------------------------------


def test_negatives_empty_request():
    g = parse("0 1\n1 2\n")
    assert len(sample_negatives(g, NoiseDistribution.from_graph(g), 0, np.random.default_rng(0))) == 0


def test_negatives_deterministic():
    g = parse("0 1\n1 2\n2 3\n")
    nd = NoiseDistribution.from_graph(g)
    a = sample_negatives(g, nd, 50, np.random.default_rng(5))
    b = sample_negatives(g, nd, 50, np.random.default_rng(5))
    assert a.tolist() == b.tolist()


def test_negatives_without_edges():
    g = Graph.from_edges(np.zeros((0, 2)), 3)
    with pytest.raises(ValueError):
        NoiseDistribution.from_graph(g)


def test_negative_frequencies_within_three_sigma():
    # star plus a tail: degrees 4, 2, 1, 1, 2
    g = parse("0 1\n0 2\n0 3\n0 4\n1 4\n")
    deg = np.array([4, 2, 1, 1, 2], dtype=float)
    p = deg**0.75 / (deg**0.75).sum()
    n = 100_000
    draws = sample_negatives(g, NoiseDistribution.from_graph(g), n, np.random.default_rng(0))
    counts = np.bincount(draws, minlength=5)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


@given(edge_lists, st.integers(0, 200), st.integers(0, 2**32 - 1))
def test_negatives_in_range(pairs, m, seed):
    g = parse(_text(pairs))
    if g.edge_count == 0:
        return
    nd = NoiseDistribution.from_graph(g)
    assert np.all(np.diff(nd.cumulative) >= 0)
    out = sample_negatives(g, nd, m, np.random.default_rng(seed))
    assert len(out) == m
    assert np.all((out >= 0) & (out < g.node_count))


# -- block models ------------------------------------------------------------


def test_sbm_degenerate_cliques():
    g, truth = generate_sbm(6, 2, 1.0, 0.0, seed=0)
    assert g.edge_count == 6
    assert sorted(map(sorted, truth.members)) == [[0, 1, 2], [3, 4, 5]]
    for com in truth.members:
        for a in com:
            for b in com:
                if a != b:
                    assert b in g.neighbors(a)


def test_sbm_deterministic():
    a, _ = generate_sbm(100, 4, 0.2, 0.01, seed=11)
    b, _ = generate_sbm(100, 4, 0.2, 0.01, seed=11)
    assert a.edges.tolist() == b.edges.tolist()


def test_sbm_edge_count_within_three_sigma():
    within = 3 * 100 * 99 // 2
    across = 3 * 100 * 100
    mean = within * 0.1 + across * 0.005
    sigma = math.sqrt(within * 0.1 * 0.9 + across * 0.005 * 0.995)
    for seed in range(5):
        g, _ = generate_sbm(300, 3, 0.1, 0.005, seed=seed)
        assert abs(g.edge_count - mean) <= 3 * sigma


def test_sbm_rejects_bad_arguments():
    with pytest.raises(ValueError):
        generate_sbm(3, 4, 0.5, 0.1)
    with pytest.raises(ValueError):
        generate_sbm(10, 2, 0.1, 0.5)


def test_sbm_pair_sampler_covers_every_within_pair():
    # p_in = 1 must produce each unordered pair exactly once
    g, _ = generate_sbm(37, 1, 1.0, 1.0, seed=3)
    assert g.edge_count == 37 * 36 // 2


def test_hierarchical_sbm_levels_nest():
    g, levels = generate_hierarchical_sbm(120, (3, 2), [0.01, 0.1, 0.4], seed=1)
    coarse, fine = levels[0].labels(), levels[1].labels()
    assert levels[0].k == 3 and levels[1].k == 6
    assert np.array_equal(fine // 2, coarse)


# -- communities -------------------------------------------------------------


def test_community_views_are_inverse():
    cs = CommunitySet.from_membership([{0}, {0, 1}, set(), {1}], 2)
    assert [sorted(m) for m in cs.members] == [[0, 1], [1, 3]]
    assert cs.membership == [{0}, {0, 1}, set(), {1}]
    assert not cs.is_partition()
    with pytest.raises(ValueError):
        cs.labels()


def test_community_io_round_trip():
    g = parse("a b\nb c\nc d\n")
    cs = CommunitySet.from_labels([0, 0, 1, 1])
    buf = io.StringIO()
    write_communities(cs, g.labels, buf)
    assert buf.getvalue() == "a\tb\nc\td\n"
    back, missing = load_communities(io.StringIO(buf.getvalue() + "zz\n"), g)
    assert missing == 1
    assert [sorted(m) for m in back.members] == [[0, 1], [2, 3]]


def test_named_communities():
    g = parse("1 2\n2 3\n")
    cs, _ = load_communities(io.StringIO("circle0\t1\t2\ncircle1 3\n"), g, named=True)
    assert [sorted(m) for m in cs.members] == [[0, 1], [2]]
