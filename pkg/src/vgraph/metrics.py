"""Community and embedding quality scores.

Non-overlapping outputs are scored with NMI and Newman modularity,
overlapping ones with symmetric best-match F1 and Jaccard, and node
embeddings with a one-vs-rest logistic regression (Micro/Macro-F1).
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, TextIO

import numpy as np
import scipy.sparse as sp

from .graph import CommunitySet, Graph, ParseError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabelSet:
    """Single class label per node, for the labelled subset of nodes."""

    nodes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.nodes) != len(self.labels):
            raise ValueError("nodes and labels differ in length")
        if len(np.unique(self.nodes)) != len(self.nodes):
            raise ValueError("a node is labelled twice")

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)


def load_labels(stream: Iterable[str], g: Graph) -> tuple[LabelSet, int]:
    """Read ``node<ws>label`` lines; returns the labels and how many named missing nodes.

    Nodes absent from ``g`` are skipped (and counted) rather than rejected,
    since label files often cover nodes the edge list dropped.
    """
    nodes, labels, missing = [], [], 0
    for lineno, line in enumerate(stream, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(lineno, f"expected 'node label', got {len(parts)} fields")
        if not g.has_label(parts[0]):
            missing += 1
            continue
        nodes.append(g.index_of(parts[0]))
        labels.append(parts[1])
    return LabelSet(np.asarray(nodes, dtype=np.int64), np.asarray(labels)), missing


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a: CommunitySet, b: CommunitySet) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    Both arguments must be partitions of the same nodes; nodes unassigned in
    either one are left out. Two single-cluster partitions score 1.
    """
    if a.node_count != b.node_count:
        raise ValueError("partitions cover different node counts")
    la, lb = a.labels(), b.labels()
    keep = (la >= 0) & (lb >= 0)
    if not keep.any():
        raise ValueError("no node is assigned in both partitions")
    la, lb = la[keep], lb[keep]
    _, ia = np.unique(la, return_inverse=True)
    _, ib = np.unique(lb, return_inverse=True)
    table = sp.coo_matrix(
        (np.ones(len(ia)), (ia, ib)), shape=(ia.max() + 1, ib.max() + 1)
    ).toarray()
    n = table.sum()
    ha = _entropy(table.sum(axis=1))
    hb = _entropy(table.sum(axis=0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    return float(np.clip(mi / ((ha + hb) / 2.0), 0.0, 1.0))


def modularity(g: Graph, p: CommunitySet) -> float:
    """Newman modularity ``sum_c l_c/m - (d_c/2m)^2``.

    Unassigned nodes belong to no community: they add nothing to any term
    but their edges still count in ``m``.
    """
    return modularity_report(g, p)[0]


def modularity_report(g: Graph, p: CommunitySet) -> tuple[float, int]:
    """Modularity plus the number of unassigned nodes left out of the sum."""
    if g.edge_count == 0:
        raise ValueError("modularity is undefined on a graph without edges")
    if p.node_count != g.node_count:
        raise ValueError("partition does not match the graph")
    lab = p.labels()
    m = g.edge_count
    u, v = g.edges[:, 0], g.edges[:, 1]
    inside = (lab[u] == lab[v]) & (lab[u] >= 0)
    l_c = np.bincount(lab[u][inside], minlength=p.k)
    assigned = lab >= 0
    d_c = np.bincount(lab[assigned], weights=g.degrees[assigned], minlength=p.k)
    q = float((l_c / m).sum() - ((d_c / (2.0 * m)) ** 2).sum())
    return q, int((~assigned).sum())


# ---------------------------------------------------------------------------
# overlapping covers
# ---------------------------------------------------------------------------


def _incidence(cs: CommunitySet) -> sp.csr_matrix:
    rows = [j for j, com in enumerate(cs.members) for _ in com]
    cols = [v for com in cs.members for v in sorted(com)]
    return sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(cs.k, cs.node_count)
    )


def _pairwise_overlap(pred: CommunitySet, truth: CommunitySet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if pred.node_count != truth.node_count:
        raise ValueError("community sets cover different node counts")
    pred, truth = pred.nonempty(), truth.nonempty()
    if pred.k == 0 or truth.k == 0:
        raise ValueError("overlap scores need at least one nonempty community on each side")
    inter = (_incidence(truth) @ _incidence(pred).T).toarray()
    st = np.array([len(c) for c in truth.members], dtype=float)
    sp_ = np.array([len(c) for c in pred.members], dtype=float)
    return inter, st, sp_


def _best_match(score: np.ndarray) -> float:
    """Average of row-wise and column-wise best scores (truth x pred matrix)."""
    return float(0.5 * (score.max(axis=1).mean() + score.max(axis=0).mean()))


def overlapping_f1(pred: CommunitySet, truth: CommunitySet) -> float:
    """Symmetric best-match F1 between two covers; empty communities are skipped."""
    inter, st, sp_ = _pairwise_overlap(pred, truth)
    f1 = 2.0 * inter / (st[:, None] + sp_[None, :])
    return _best_match(f1)


def overlapping_jaccard(pred: CommunitySet, truth: CommunitySet) -> float:
    """Symmetric best-match Jaccard similarity; empty communities are skipped."""
    inter, st, sp_ = _pairwise_overlap(pred, truth)
    jac = inter / (st[:, None] + sp_[None, :] - inter)
    return _best_match(jac)


# ---------------------------------------------------------------------------
# node classification
# ---------------------------------------------------------------------------


def classify_nodes(
    embeddings: np.ndarray,
    labels: LabelSet,
    train_fraction: float = 0.7,
    seed: int = 0,
) -> tuple[float, float]:
    """Micro/Macro-F1 of one-vs-rest logistic regression on a random split.

    A seeded permutation puts ``train_fraction`` of the labelled nodes in the
    training split. Macro-F1 averages over classes present in the test split.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import f1_score
    from sklearn.multiclass import OneVsRestClassifier

    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(labels.nodes)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError("split leaves an empty train or test set")
    tr, te = order[:n_train], order[n_train:]
    x = np.asarray(embeddings, dtype=float)[labels.nodes]
    y = labels.labels
    train_classes = np.unique(y[tr])
    if len(train_classes) < 2:
        raise ValueError("need at least two classes in the training split")
    test_classes = np.unique(y[te])
    unseen = np.setdiff1d(test_classes, train_classes)
    if len(unseen):
        warnings.warn(
            f"{len(unseen)} test class(es) never appear in training; "
            "Macro-F1 still averages over every class present in the test split",
            stacklevel=2,
        )
    clf = OneVsRestClassifier(LogisticRegression(C=1.0, max_iter=5000))
    clf.fit(x[tr], y[tr])
    pred = clf.predict(x[te])
    micro = f1_score(y[te], pred, average="micro")
    macro = f1_score(y[te], pred, labels=test_classes, average="macro", zero_division=0)
    return float(micro), float(macro)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def metrics_report(values: Mapping[str, float], config: Mapping | None = None) -> dict:
    return {"metrics": dict(values), "config": dict(config or {})}


def format_table(values: Mapping[str, float]) -> str:
    """Two aligned columns: metric name, value to four decimals."""
    if not values:
        return ""
    width = max(len(k) for k in values)
    lines = [f"{'metric'.ljust(width)}  value"]
    for k, v in values.items():
        lines.append(f"{k.ljust(width)}  {v:.4f}" if isinstance(v, float) else f"{k.ljust(width)}  {v}")
    return "\n".join(lines)


def write_report(report: dict, stream: TextIO) -> None:
    json.dump(report, stream, indent=2, sort_keys=True)
    stream.write("\n")
