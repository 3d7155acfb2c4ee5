import io

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import normalized_mutual_info_score

from vgraph.graph import CommunitySet, Graph, ParseError
from vgraph.metrics import (
    LabelSet,
    classify_nodes,
    format_table,
    load_labels,
    metrics_report,
    modularity,
    modularity_report,
    nmi,
    overlapping_f1,
    overlapping_jaccard,
    write_report,
)
from vgraph.verify import random_graph

part = CommunitySet.from_labels


def cover(*groups, n=None):
    n = n if n is not None else max(max(g) for g in groups) + 1
    return CommunitySet(tuple(frozenset(g) for g in groups), n)


labels20 = st.lists(st.integers(0, 4), min_size=20, max_size=20)


# -- NMI ---------------------------------------------------------------------


def test_nmi_identical():
    assert nmi(part([0, 0, 1, 2, 2]), part([1, 1, 0, 2, 2])) == pytest.approx(1.0, abs=1e-12)


def test_nmi_single_cluster_side():
    assert nmi(part([0, 0, 0, 0]), part([0, 1, 0, 1])) == 0.0


def test_nmi_both_single_cluster():
    assert nmi(part([0, 0, 0]), part([0, 0, 0])) == 1.0


def test_nmi_crossed_pairs_hand_case():
    # {1,2}{3,4} vs {1,3}{2,4}: every cell of the contingency table holds one node
    assert nmi(part([0, 0, 1, 1]), part([0, 1, 0, 1])) == pytest.approx(0.0, abs=1e-12)


def test_nmi_rejects_overlap():
    with pytest.raises(ValueError):
        nmi(cover({0, 1}, {1, 2}), part([0, 0, 1]))


def test_nmi_skips_unassigned_nodes():
    assert nmi(part([0, 0, 1, 1, -1]), part([0, 0, 1, 1, 0])) == pytest.approx(1.0)


@given(labels20, labels20)
def test_nmi_matches_sklearn_and_is_symmetric(a, b):
    x, y = nmi(part(a), part(b)), nmi(part(b), part(a))
    assert x == pytest.approx(y, abs=1e-12)
    assert 0.0 <= x <= 1.0
    ref = normalized_mutual_info_score(a, b, average_method="arithmetic")
    assert x == pytest.approx(ref, abs=1e-12)


# -- modularity --------------------------------------------------------------


def two_triangles():
    return Graph.from_edges([(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)], 6)


def test_modularity_one_community():
    assert modularity(two_triangles(), part([0] * 6)) == pytest.approx(0.0, abs=1e-15)


def test_modularity_two_triangles():
    assert modularity(two_triangles(), part([0, 0, 0, 1, 1, 1])) == pytest.approx(0.5, abs=1e-12)


def test_modularity_empty_graph():
    with pytest.raises(ValueError):
        modularity(Graph.from_edges(np.zeros((0, 2)), 2), part([0, 0]))


def test_modularity_reports_exclusions():
    q, excluded = modularity_report(two_triangles(), part([0, 0, 0, 1, 1, -1]))
    assert excluded == 1
    # community 1 = {3, 4}: one internal edge, degree 4
    assert q == pytest.approx(3 / 6 - (6 / 12) ** 2 + 1 / 6 - (4 / 12) ** 2, abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.lists(st.integers(0, 3), min_size=20, max_size=20))
def test_modularity_matches_networkx(seed, lab):
    g = random_graph(np.random.default_rng(seed), 20, p=0.2)
    q = modularity(g, part(lab))
    assert q <= 1.0
    nxg = nx.Graph(g.edges.tolist())
    comms = [c for c in part(lab, 4).members if c]
    assert q == pytest.approx(nx.community.modularity(nxg, comms), abs=1e-12)


# -- overlapping scores ------------------------------------------------------


def test_overlap_identical():
    c = cover({0, 1}, {1, 2, 3})
    assert overlapping_f1(c, c) == 1.0
    assert overlapping_jaccard(c, c) == 1.0


def test_overlap_disjoint():
    a, b = cover({0, 1}, n=4), cover({2, 3}, n=4)
    assert overlapping_f1(a, b) == 0.0
    assert overlapping_jaccard(a, b) == 0.0


def test_overlap_hand_case():
    # truth {A,B},{C}; pred {A,B,C}
    # F1: 0.8 and 0.5, so 0.5 * ((0.8 + 0.5) / 2 + 0.8) = 0.725
    # Jaccard: 2/3 and 1/3, so 0.5 * ((2/3 + 1/3) / 2 + 2/3) = 7/12
    truth, pred = cover({0, 1}, {2}), cover({0, 1, 2})
    assert overlapping_f1(pred, truth) == pytest.approx(0.725, abs=1e-12)
    assert overlapping_jaccard(pred, truth) == pytest.approx(7 / 12, abs=1e-12)


def test_overlap_skips_empty_communities():
    truth = cover({0, 1}, {2})
    padded = CommunitySet((frozenset({0, 1, 2}), frozenset()), 3)
    assert overlapping_f1(padded, truth) == pytest.approx(0.725, abs=1e-12)


def test_overlap_needs_communities():
    with pytest.raises(ValueError):
        overlapping_f1(CommunitySet((frozenset(),), 3), cover({0}, n=3))


@st.composite
def covers(draw):
    k = draw(st.integers(1, 4))
    return CommunitySet(
        tuple(frozenset(draw(st.sets(st.integers(0, 9), min_size=1, max_size=6))) for _ in range(k)), 10
    )


@given(covers(), covers())
def test_overlap_range_symmetry_and_identity(a, b):
    for fn in (overlapping_f1, overlapping_jaccard):
        x = fn(a, b)
        assert 0.0 <= x <= 1.0
        assert x == pytest.approx(fn(b, a), abs=1e-12)
        same = set(a.members) == set(b.members)
        assert (x == pytest.approx(1.0, abs=1e-12)) == same


# -- classification ----------------------------------------------------------


def labelled(y):
    return LabelSet(np.arange(len(y)), np.asarray(y))


def test_one_hot_embeddings_separable():
    y = np.repeat(["a", "b", "c"], 30)
    emb = np.eye(3)[np.repeat([0, 1, 2], 30)] * 5
    micro, macro = classify_nodes(emb, labelled(y), seed=1)
    assert micro == 1.0 and macro == 1.0


def test_constant_embeddings_score_majority_fraction():
    y = np.array(["a"] * 60 + ["b"] * 25 + ["c"] * 15)
    micro, _ = classify_nodes(np.ones((100, 4)), labelled(y), seed=3)
    order = np.random.default_rng(3).permutation(100)
    train, test = y[order[:70]], y[order[70:]]
    values, counts = np.unique(train, return_counts=True)
    majority = values[counts.argmax()]
    assert micro == pytest.approx(np.mean(test == majority), abs=1e-12)


def test_classification_deterministic():
    rng = np.random.default_rng(0)
    emb, y = rng.normal(size=(80, 5)), rng.integers(0, 3, 80).astype(str)
    assert classify_nodes(emb, labelled(y), seed=4) == classify_nodes(emb, labelled(y), seed=4)


def test_unseen_test_class_warns():
    y = np.array(["a", "b"] * 20 + ["z"])
    emb = np.random.default_rng(0).normal(size=(41, 3))
    order = np.random.default_rng(0).permutation(41)
    assert "z" in y[order[29:]]
    with pytest.warns(UserWarning, match="never appear in training"):
        classify_nodes(emb, labelled(y), seed=0)


def test_classification_needs_two_training_classes():
    with pytest.raises(ValueError):
        classify_nodes(np.ones((10, 2)), labelled(["a"] * 10))


def test_load_labels():
    g = Graph.from_edges([(0, 1), (1, 2)], 3, labels=["x", "y", "z"])
    ls, missing = load_labels(io.StringIO("x 1\n# c\nq 2\nz 1\n"), g)
    assert ls.nodes.tolist() == [0, 2] and ls.labels.tolist() == ["1", "1"] and missing == 1
    with pytest.raises(ParseError):
        load_labels(io.StringIO("x\n"), g)


# -- reports -----------------------------------------------------------------


def test_report_formats():
    values = {"nmi": 0.91234, "modularity": 0.4}
    rep = metrics_report(values, {"k": 3})
    buf = io.StringIO()
    write_report(rep, buf)
    assert '"nmi": 0.91234' in buf.getvalue()
    table = format_table(values).splitlines()
    assert table[1] == "nmi         0.9123"
