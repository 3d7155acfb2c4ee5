"""Model parameters and forward computations.

Node ``w`` draws a community from the prior ``softmax_j(phi[w] . psi[j])``
and the community emits a neighbor from ``softmax_c(psi[j] . varphi[c])``.
The variational posterior for an edge scores ``(phi[w] * phi[c]) . psi[j]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import CommunitySet, Graph

PROB_FLOOR = 1e-10


@dataclass
class ModelParams:
    """Embedding matrices: ``phi``/``varphi`` are ``(V, d)``, ``psi`` is ``(K, d)``."""

    phi: np.ndarray
    varphi: np.ndarray
    psi: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        d = self.phi.shape[1]
        if self.varphi.shape[1] != d or self.psi.shape[1] != d:
            raise ValueError("embedding matrices must share their second dimension")
        if self.phi.shape[0] != self.varphi.shape[0]:
            raise ValueError("phi and varphi must have one row per node")
        if not self.phi.dtype == self.varphi.dtype == self.psi.dtype:
            raise ValueError("embedding matrices must share a dtype")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def node_count(self) -> int:
        return self.phi.shape[0]

    @property
    def k(self) -> int:
        return self.psi.shape[0]

    @property
    def dim(self) -> int:
        return self.phi.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.phi.copy(), self.varphi.copy(), self.psi.copy(), self.tau)

    def matrices(self) -> dict[str, np.ndarray]:
        return {"phi": self.phi, "varphi": self.varphi, "psi": self.psi}

    def is_finite(self) -> bool:
        return all(np.isfinite(m).all() for m in self.matrices().values())


def init_params(
    node_count: int,
    k: int,
    d: int,
    rng: np.random.Generator | int | None = None,
    tau: float = 1.0,
    dtype: str | np.dtype = "float64",
) -> ModelParams:
    """I.i.d. ``N(0, 1/d)`` entries so initial logits are O(1).

    Draws are made in double precision and then cast, so the random stream
    does not depend on ``dtype``.
    """
    rng = np.random.default_rng(rng)
    scale = 1.0 / np.sqrt(d)
    phi = rng.normal(0.0, scale, size=(node_count, d))
    varphi = rng.normal(0.0, scale, size=(node_count, d))
    psi = rng.normal(0.0, scale, size=(k, d))
    dtype = np.dtype(dtype)
    return ModelParams(phi.astype(dtype, copy=False), varphi.astype(dtype, copy=False),
                       psi.astype(dtype, copy=False), tau)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=axis, keepdims=True))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def prior_distribution(params: ModelParams, w: int) -> np.ndarray:
    return softmax(params.psi @ params.phi[w])


def prior_matrix(params: ModelParams, nodes: np.ndarray | None = None) -> np.ndarray:
    phi = params.phi if nodes is None else params.phi[nodes]
    return softmax(phi @ params.psi.T)


def decoder_distribution(params: ModelParams, j: int) -> np.ndarray:
    if not 0 <= j < params.k:
        raise IndexError(f"community {j} out of range")
    return softmax(params.varphi @ params.psi[j])


def negative_sampling_objective(
    params: ModelParams, c: int, j: int, negatives: np.ndarray
) -> float:
    """``log sig(varphi_c . psi_j) + sum_v log sig(-varphi_v . psi_j)``."""
    psi_j = params.psi[j]
    pos = log_sigmoid(params.varphi[c] @ psi_j)
    negatives = np.asarray(negatives, dtype=np.int64)
    neg = log_sigmoid(-(params.varphi[negatives] @ psi_j)).sum() if len(negatives) else 0.0
    return float(pos + neg)


def posterior_distribution(params: ModelParams, w: int, c: int) -> np.ndarray:
    return softmax(params.psi @ (params.phi[w] * params.phi[c]))


def posterior_matrix(params: ModelParams, pairs: np.ndarray) -> np.ndarray:
    """Edge posteriors ``q(z | w, c)`` for every row of ``pairs``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    h = params.phi[pairs[:, 0]] * params.phi[pairs[:, 1]]
    return softmax(h @ params.psi.T)


def gumbel_softmax(
    dist: np.ndarray, tau: float, noise: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Relaxed sample ``softmax((log dist + noise) / tau)`` and its one-hot argmax.

    Works on a single distribution or a batch (last axis is the category).
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    logits = (np.log(np.maximum(dist, PROB_FLOOR)) + noise) / tau
    relaxed = softmax(logits)
    hard = np.zeros_like(relaxed)
    np.put_along_axis(hard, relaxed.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return relaxed, hard


def node_membership(params: ModelParams, g: Graph, w: int) -> np.ndarray:
    """Average of the edge posteriors over ``w``'s neighbors."""
    nbrs = g.neighbors(w)
    if len(nbrs) == 0:
        raise ValueError(f"node {w} is isolated; membership undefined")
    pairs = np.stack([np.full(len(nbrs), w), nbrs], axis=1)
    return posterior_matrix(params, pairs).mean(axis=0)


def node_memberships(params: ModelParams, g: Graph) -> np.ndarray:
    """Membership rows for all nodes; isolated nodes get NaN rows."""
    deg = g.degrees
    src = np.repeat(np.arange(g.node_count), deg)
    q = posterior_matrix(params, np.stack([src, g.indices], axis=1))
    return _average_rows(q, g.indptr, deg)


def _average_rows(q: np.ndarray, indptr: np.ndarray, deg: np.ndarray) -> np.ndarray:
    out = np.full((len(deg), q.shape[1]), np.nan)
    has = deg > 0
    if len(q):
        sums = np.add.reduceat(q, indptr[:-1][has], axis=0)
        out[has] = sums / deg[has, None]
    return out


def assign_from_memberships(memberships: np.ndarray, k: int) -> CommunitySet:
    """Argmax per row (lowest index on ties); NaN rows stay unassigned."""
    labels = np.full(len(memberships), -1, dtype=np.int64)
    ok = ~np.isnan(memberships).any(axis=1)
    labels[ok] = memberships[ok].argmax(axis=1)
    return CommunitySet.from_labels(labels, k)


def assign_from_edges(g: Graph, edge_community: np.ndarray, k: int) -> CommunitySet:
    """Each node joins the communities assigned to its incident edges."""
    groups = [set() for _ in range(k)]
    for (u, v), j in zip(g.edges.tolist(), np.asarray(edge_community).tolist()):
        groups[j].add(u)
        groups[j].add(v)
    return CommunitySet(tuple(frozenset(s) for s in groups), g.node_count)


def assign_nonoverlapping(params: ModelParams, g: Graph) -> CommunitySet:
    return assign_from_memberships(node_memberships(params, g), params.k)


def assign_overlapping(params: ModelParams, g: Graph) -> CommunitySet:
    q = posterior_matrix(params, g.edges)
    return assign_from_edges(g, q.argmax(axis=1), params.k)
