"""Graph ingestion, neighborhoods, negative-sampling noise and synthetic block models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

NOISE_EXPONENT = 0.75


class ParseError(ValueError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph over dense indices ``0..node_count-1``.

    ``indptr``/``indices`` hold the adjacency in CSR form with each
    neighbor list sorted. ``labels[i]`` is the external label of node ``i``.
    """

    node_count: int
    edges: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    labels: tuple[str, ...]
    self_loops_dropped: int = 0
    _index: dict = field(default=None, repr=False, compare=False)

    @classmethod
    def from_edges(
        cls,
        edges: np.ndarray | Sequence[tuple[int, int]],
        node_count: int,
        labels: Sequence[str] | None = None,
        self_loops_dropped: int = 0,
    ) -> "Graph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if labels is None:
            labels = [str(i) for i in range(node_count)]
        if len(labels) != node_count:
            raise ValueError("labels must have one entry per node")
        if edges.size and (edges.min() < 0 or edges.max() >= node_count):
            raise ValueError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-loops are not allowed")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        if len(np.unique(lo * node_count + hi)) != len(edges):
            raise ValueError("duplicate edges are not allowed")

        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        order = np.lexsort((cols, rows))
        indices = cols[order]
        indptr = np.zeros(node_count + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=node_count), out=indptr[1:])
        index = {lab: i for i, lab in enumerate(labels)}
        if len(index) != node_count:
            raise ValueError("labels must be unique")
        return cls(
            node_count=node_count,
            edges=_frozen(edges.copy()),
            indptr=_frozen(indptr),
            indices=_frozen(indices),
            labels=tuple(labels),
            self_loops_dropped=self_loops_dropped,
            _index=index,
        )

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, w: int) -> np.ndarray:
        self._check(w)
        return self.indices[self.indptr[w] : self.indptr[w + 1]]

    def index_of(self, label: str) -> int:
        return self._index[label]

    def has_label(self, label: str) -> bool:
        return label in self._index

    def adjacency_matrix(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices), dtype=np.float64)
        return sp.csr_matrix(
            (data, self.indices, self.indptr), shape=(self.node_count, self.node_count)
        )

    def ordered_pairs(self) -> np.ndarray:
        """Every edge in both directions, shape ``(2E, 2)``."""
        return np.concatenate([self.edges, self.edges[:, ::-1]])

    def _check(self, w: int) -> None:
        if not 0 <= w < self.node_count:
            raise IndexError(f"node index {w} out of range [0, {self.node_count})")


def load_edge_list(stream: Iterable[str]) -> Graph:
    """Parse a whitespace-separated edge list.

    Blank lines and ``#`` comments are skipped, self-loops are dropped and
    repeated edges (in either orientation) are kept once. Labels are indexed
    in order of first appearance.
    """
    index: dict[str, int] = {}
    labels: list[str] = []
    seen: set[tuple[int, int]] = set()
    edges: list[tuple[int, int]] = []
    loops = 0
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise ParseError(lineno, f"expected 2 node labels, got {len(tokens)}")
        ids = []
        for tok in tokens:
            if tok not in index:
                index[tok] = len(labels)
                labels.append(tok)
            ids.append(index[tok])
        u, v = ids
        if u == v:
            loops += 1
            continue
        key = (u, v) if u < v else (v, u)
        if key in seen:
            continue
        seen.add(key)
        edges.append((u, v))
    if loops:
        logger.info("dropped %d self-loop(s)", loops)
    # a label that only appeared in self-loops would be isolated: drop it
    used = np.zeros(len(labels), dtype=bool)
    for u, v in edges:
        used[u] = used[v] = True
    if not used.all():
        remap = np.cumsum(used) - 1
        labels = [lab for lab, keep in zip(labels, used) if keep]
        edges = [(int(remap[u]), int(remap[v])) for u, v in edges]
    return Graph.from_edges(np.array(edges, dtype=np.int64).reshape(-1, 2), len(labels), labels, loops)


def write_edge_list(g: Graph, stream: TextIO) -> None:
    for u, v in g.edges:
        stream.write(f"{g.labels[u]}\t{g.labels[v]}\n")


@dataclass(frozen=True, eq=False)
class CommunitySet:
    """Communities as node-index sets, with the per-node inverse view."""

    members: tuple[frozenset, ...]
    node_count: int

    def __post_init__(self):
        for com in self.members:
            for v in com:
                if not 0 <= v < self.node_count:
                    raise ValueError(f"community member {v} out of range")

    @classmethod
    def from_labels(cls, labels: Sequence[int], k: int | None = None) -> "CommunitySet":
        """Partition from a per-node label vector; ``-1`` marks unassigned nodes."""
        labels = np.asarray(labels)
        k = int(labels.max()) + 1 if k is None else k
        groups = [[] for _ in range(k)]
        for v, lab in enumerate(labels):
            if lab >= 0:
                groups[lab].append(v)
        return cls(tuple(frozenset(g) for g in groups), len(labels))

    @classmethod
    def from_membership(cls, membership: Sequence[Iterable[int]], k: int) -> "CommunitySet":
        groups = [set() for _ in range(k)]
        for v, coms in enumerate(membership):
            for j in coms:
                groups[j].add(v)
        return cls(tuple(frozenset(g) for g in groups), len(membership))

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def membership(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(self.node_count)]
        for j, com in enumerate(self.members):
            for v in com:
                out[v].add(j)
        return out

    def covered(self) -> np.ndarray:
        mask = np.zeros(self.node_count, dtype=bool)
        for com in self.members:
            mask[list(com)] = True
        return mask

    def is_partition(self) -> bool:
        """True when no node belongs to more than one community."""
        total = sum(len(c) for c in self.members)
        return total == int(self.covered().sum())

    def labels(self) -> np.ndarray:
        """Per-node community index (``-1`` if unassigned); requires a partition."""
        if not self.is_partition():
            raise ValueError("community set is overlapping")
        out = np.full(self.node_count, -1, dtype=np.int64)
        for j, com in enumerate(self.members):
            out[list(com)] = j
        return out

    def nonempty(self) -> "CommunitySet":
        return CommunitySet(tuple(c for c in self.members if c), self.node_count)

    def map_communities(self, mapping: Sequence[int], k: int) -> "CommunitySet":
        """Merge community ``j`` into ``mapping[j]`` (e.g. a leaf into its ancestor)."""
        groups = [set() for _ in range(k)]
        for j, com in enumerate(self.members):
            groups[mapping[j]].update(com)
        return CommunitySet(tuple(frozenset(g) for g in groups), self.node_count)


def load_communities(
    stream: Iterable[str], g: Graph, named: bool = False
) -> tuple[CommunitySet, int]:
    """Read SNAP cmty lines (one community per line) against ``g``'s labels.

    With ``named=True`` the first token of each line is a community name
    (ego-network ``.circles`` files). Labels absent from the graph are
    dropped; their count is returned alongside the communities.
    """
    groups = []
    missing: set[str] = set()
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if named:
            tokens = tokens[1:]
        com = set()
        for tok in tokens:
            if g.has_label(tok):
                com.add(g.index_of(tok))
            else:
                missing.add(tok)
        if com:
            groups.append(frozenset(com))
    if missing:
        logger.info("%d community label(s) not present in the graph were dropped", len(missing))
    return CommunitySet(tuple(groups), g.node_count), len(missing)


def write_communities(cs: CommunitySet, labels: Sequence[str], stream: TextIO) -> None:
    for com in cs.members:
        if com:
            stream.write("\t".join(labels[v] for v in sorted(com)) + "\n")


def jaccard_coefficient(g: Graph, w: int, c: int) -> float:
    """|N(w) & N(c)| / |N(w) | N(c)|, or 0 when both neighborhoods are empty."""
    nw, nc = g.neighbors(w), g.neighbors(c)
    union = len(np.union1d(nw, nc))
    if union == 0:
        return 0.0
    return len(np.intersect1d(nw, nc, assume_unique=True)) / union


def jaccard_weights(g: Graph, pairs: np.ndarray) -> np.ndarray:
    """Vectorized Jaccard coefficients for an array of node pairs (shape ``(B, 2)``)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return np.zeros(0)
    a = g.adjacency_matrix()
    deg = g.degrees
    rows_a = a[pairs[:, 0]]
    rows_b = a[pairs[:, 1]]
    common = np.asarray(rows_a.multiply(rows_b).sum(axis=1)).ravel()
    union = deg[pairs[:, 0]] + deg[pairs[:, 1]] - common
    out = np.zeros(len(pairs))
    np.divide(common, union, out=out, where=union > 0)
    return out


@dataclass(frozen=True, eq=False)
class NoiseDistribution:
    """Node sampling distribution with weight proportional to ``deg ** 0.75``."""

    cumulative: np.ndarray

    @classmethod
    def from_graph(cls, g: Graph, exponent: float = NOISE_EXPONENT) -> "NoiseDistribution":
        if g.edge_count == 0:
            raise ValueError("noise distribution undefined for a graph without edges")
        weights = g.degrees.astype(np.float64) ** exponent
        return cls(_frozen(np.cumsum(weights)))

    @property
    def total(self) -> float:
        return float(self.cumulative[-1])

    @property
    def probabilities(self) -> np.ndarray:
        return np.diff(self.cumulative, prepend=0.0) / self.total


def sample_negatives(
    g: Graph, nd: NoiseDistribution, m: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``m`` node indices i.i.d. from the noise distribution."""
    if g.edge_count == 0:
        raise ValueError("cannot sample negatives from a graph without edges")
    if m < 0:
        raise ValueError("m must be nonnegative")
    u = rng.random(m) * nd.total
    idx = np.searchsorted(nd.cumulative, u, side="right")
    return np.minimum(idx, g.node_count - 1)


def _block_sizes(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def _sample_block_pairs(
    rng: np.random.Generator, sizes: Sequence[int], prob: np.ndarray
) -> np.ndarray:
    """Independent Bernoulli edges per node pair, drawn block pair by block pair.

    For each block pair the edge count is binomial and the edges are a
    uniform subset of that many distinct pairs, which is the same law as
    flipping every pair but costs O(edges) instead of O(n^2).
    """
    starts = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for a in range(len(sizes)):
        for b in range(a, len(sizes)):
            sa, sb = sizes[a], sizes[b]
            total = sa * (sa - 1) // 2 if a == b else sa * sb
            p = float(prob[a, b])
            if total == 0 or p == 0.0:
                continue
            count = rng.binomial(total, p)
            if count == 0:
                continue
            flat = np.sort(rng.choice(total, size=count, replace=False))
            if a == b:
                # invert the row-major enumeration of pairs i < j
                i = (2 * sa - 1 - np.sqrt((2 * sa - 1) ** 2 - 8 * flat.astype(np.float64))) // 2
                i = i.astype(np.int64)
                offset = i * (2 * sa - i - 1) // 2
                # guard float rounding at row boundaries
                i = np.where(offset > flat, i - 1, i)
                offset = i * (2 * sa - i - 1) // 2
                nxt = (i + 1) * (2 * sa - i - 2) // 2
                bump = flat >= nxt
                i = np.where(bump, i + 1, i)
                offset = i * (2 * sa - i - 1) // 2
                j = flat - offset + i + 1
            else:
                i, j = np.divmod(flat, sb)
            out.append(np.stack([i + starts[a], j + starts[b]], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def generate_sbm(
    n: int, k: int, p_in: float, p_out: float, seed: int | None = None
) -> tuple[Graph, CommunitySet]:
    """Planted-partition stochastic block model with ``k`` near-equal blocks.

    Nodes left isolated by the draw are dropped from the returned graph
    (and from the planted partition).
    """
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if not 0 <= p_out <= p_in <= 1:
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    sizes = _block_sizes(n, k)
    prob = np.full((k, k), p_out)
    np.fill_diagonal(prob, p_in)
    rng = np.random.default_rng(seed)
    pairs = _sample_block_pairs(rng, sizes, prob)
    block = np.repeat(np.arange(k), sizes)
    graph, keep = _planted_graph(pairs, n)
    return graph, CommunitySet.from_labels(block[keep], k)


def generate_hierarchical_sbm(
    n: int,
    branching: Sequence[int],
    probs: Sequence[float],
    seed: int | None = None,
) -> tuple[Graph, list[CommunitySet]]:
    """Nested block model: ``branching=(3, 2)`` gives 3 super-blocks of 2 sub-blocks.

    ``probs[s]`` is the edge probability for two nodes whose leaf blocks
    share their first ``s`` ancestors, so ``probs[0]`` applies across
    top-level blocks and ``probs[-1]`` inside a leaf block. Returns one
    planted partition per level, coarsest first.
    """
    branching = [int(b) for b in branching]
    if len(probs) != len(branching) + 1:
        raise ValueError("need len(branching) + 1 probabilities")
    n_leaves = int(np.prod(branching))
    if n_leaves > n:
        raise ValueError("more leaf blocks than nodes")
    widths = [int(np.prod(branching[l + 1 :])) for l in range(len(branching))]
    leaves = np.arange(n_leaves)
    shared = np.zeros((n_leaves, n_leaves), dtype=np.int64)
    for width in widths:
        anc = leaves // width
        shared += anc[:, None] == anc[None, :]
    prob = np.asarray(probs, dtype=np.float64)[shared]
    sizes = _block_sizes(n, n_leaves)
    rng = np.random.default_rng(seed)
    pairs = _sample_block_pairs(rng, sizes, prob)
    leaf = np.repeat(leaves, sizes)
    graph, keep = _planted_graph(pairs, n)
    levels = []
    for l, width in enumerate(widths):
        k_l = int(np.prod(branching[: l + 1]))
        levels.append(CommunitySet.from_labels((leaf // width)[keep], k_l))
    return graph, levels


def _planted_graph(pairs: np.ndarray, n: int) -> tuple[Graph, np.ndarray]:
    keep = np.zeros(n, dtype=bool)
    keep[pairs.ravel()] = True
    remap = np.cumsum(keep) - 1
    labels = [str(i) for i in np.flatnonzero(keep)]
    return Graph.from_edges(remap[pairs], int(keep.sum()), labels), keep
