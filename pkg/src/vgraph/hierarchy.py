"""Tree-structured communities.

A path ``z_1 -> z_2 -> ... -> z_D`` is drawn top-down: at each level a
softmax over the children of the node chosen above, with logits
``phi[w] . psi[child]``. The posterior factorizes the same way with logits
``(phi[w] * phi[c]) . psi[child]`` and the decoder is keyed on the leaf's
embedding. Tree nodes are stored level by level in ``params.psi``, so a
depth-1 tree is exactly the flat model.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, partial

import numpy as np

from .graph import CommunitySet, Graph
from .model import ModelParams, assign_from_edges, assign_from_memberships, log_softmax, softmax
from .training import (
    Batch,
    Gradients,
    LossBreakdown,
    TrainConfig,
    TrainedModel,
    decode,
    reduce_rows,
    train,
)


@dataclass(frozen=True)
class CommunityTree:
    """Uniform-depth tree given by per-level branching factors.

    ``branching = (5, 4)`` means five top-level communities with four
    children each (20 leaves). Nodes are numbered level by level; within a
    level the children of node ``t`` are ``t*b, ..., t*b + b - 1``.
    """

    branching: tuple[int, ...]

    def __post_init__(self):
        if not self.branching or any(int(b) < 1 for b in self.branching):
            raise ValueError("branching factors must be positive and nonempty")
        object.__setattr__(self, "branching", tuple(int(b) for b in self.branching))

    @classmethod
    def from_spec(cls, spec: str) -> "CommunityTree":
        """Parse ``"5,4"``."""
        try:
            return cls(tuple(int(tok) for tok in spec.split(",") if tok.strip()))
        except ValueError as exc:
            raise ValueError(f"bad tree spec {spec!r}: {exc}") from None

    def spec(self) -> str:
        return ",".join(str(b) for b in self.branching)

    @property
    def depth(self) -> int:
        return len(self.branching)

    @cached_property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(int(np.prod(self.branching[: i + 1])) for i in range(self.depth))

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.level_sizes)[:-1]]))

    @property
    def n_nodes(self) -> int:
        return sum(self.level_sizes)

    @property
    def n_leaves(self) -> int:
        return self.level_sizes[-1]

    @property
    def leaf_offset(self) -> int:
        return self.offsets[-1]

    def level_slice(self, level: int) -> slice:
        """Columns of level ``level`` (1-based) in the node layout."""
        o = self.offsets[level - 1]
        return slice(o, o + self.level_sizes[level - 1])

    def decoder_map(self, key: str = "leaf") -> np.ndarray:
        """``(leaves, nodes)`` 0/1 matrix: row ``l`` picks the embeddings summed for leaf ``l``.

        ``"leaf"`` keys the decoder on the leaf alone, ``"path"`` on the sum
        over the leaf and all its ancestors.
        """
        if key not in ("leaf", "path"):
            raise ValueError(f"unknown tree decoder {key!r}")
        out = np.zeros((self.n_leaves, self.n_nodes))
        leaves = np.arange(self.n_leaves)
        levels = range(1, self.depth + 1) if key == "path" else [self.depth]
        for level in levels:
            out[leaves, self.offsets[level - 1] + self.ancestor_map(level)] = 1.0
        return out

    def ancestor_map(self, level: int) -> np.ndarray:
        """Within-level index of each leaf's ancestor at ``level`` (1-based)."""
        return np.arange(self.n_leaves) // (self.n_leaves // self.level_sizes[level - 1])

    # -- factorized distributions -------------------------------------------

    def log_probs(self, logits: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Per-level conditional log-probabilities and leaf log-probabilities.

        ``logits`` has one column per tree node (any leading shape collapsed
        to rows).
        """
        logits = np.atleast_2d(logits)
        B = logits.shape[0]
        cond = []
        leaf = np.zeros((B, self.n_leaves))
        for level, b in enumerate(self.branching, 1):
            x = logits[:, self.level_slice(level)].reshape(B, -1, b)
            lp = log_softmax(x, axis=-1).reshape(B, -1)
            cond.append(lp)
            leaf = leaf + np.repeat(lp, self.n_leaves // lp.shape[1], axis=1)
        return cond, leaf

    def leaf_to_levels(self, g_leaf: np.ndarray) -> list[np.ndarray]:
        """Sum leaf-indexed values into every ancestor, level by level."""
        B = g_leaf.shape[0]
        return [g_leaf.reshape(B, n, -1).sum(axis=2) for n in self.level_sizes]

    def group_backward(self, cond_logp: list[np.ndarray], g_cond: list[np.ndarray]) -> np.ndarray:
        """Gradient w.r.t. node logits given gradients w.r.t. conditional log-probs."""
        B = g_cond[0].shape[0]
        out = np.empty((B, self.n_nodes))
        for level, b in enumerate(self.branching, 1):
            g = g_cond[level - 1].reshape(B, -1, b)
            prob = np.exp(cond_logp[level - 1]).reshape(B, -1, b)
            out[:, self.level_slice(level)] = (g - prob * g.sum(axis=2, keepdims=True)).reshape(B, -1)
        return out

    def greedy_leaf(self, cond: list[np.ndarray]) -> np.ndarray:
        """Leaf reached by taking the largest child at every level (lowest index on ties)."""
        B = cond[0].shape[0]
        idx = np.zeros(B, dtype=np.int64)
        rows = np.arange(B)
        for level, b in enumerate(self.branching, 1):
            groups = cond[level - 1].reshape(B, -1, b)
            idx = idx * b + groups[rows, idx].argmax(axis=1)
        return idx


def _check_params(params: ModelParams, tree: CommunityTree) -> None:
    if params.k != tree.n_nodes:
        raise ValueError(f"psi has {params.k} rows but the tree has {tree.n_nodes} nodes")


def path_prior(params: ModelParams, tree: CommunityTree, w: int) -> np.ndarray:
    """``p(leaf | w)`` as the product of per-level conditionals."""
    _check_params(params, tree)
    if not 0 <= w < params.node_count:
        raise IndexError(f"node {w} out of range")
    return np.exp(tree.log_probs(params.psi @ params.phi[w])[1][0])


def path_prior_matrix(params: ModelParams, tree: CommunityTree, nodes: np.ndarray | None = None) -> np.ndarray:
    phi = params.phi if nodes is None else params.phi[nodes]
    return np.exp(tree.log_probs(phi @ params.psi.T)[1])


def leaf_posterior_matrix(params: ModelParams, tree: CommunityTree, pairs: np.ndarray) -> np.ndarray:
    """``q(leaf | w, c)`` for every row of ``pairs``."""
    _check_params(params, tree)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    h = params.phi[pairs[:, 0]] * params.phi[pairs[:, 1]]
    return np.exp(tree.log_probs(h @ params.psi.T)[1])


def hierarchical_edge_likelihood(
    params: ModelParams, tree: CommunityTree, w: int, c: int, key: str = "leaf"
) -> float:
    """``sum_leaf p(c | leaf) p(leaf | w)`` with a full softmax decoder over nodes."""
    prior = path_prior(params, tree, w)
    dec = softmax(tree.decoder_map(key) @ params.psi @ params.varphi.T)
    return float(prior @ dec[:, c])


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def hierarchical_objective(
    params: ModelParams,
    batch: Batch,
    *,
    tree: CommunityTree,
    lam: float = 0.0,
    tau: float | None = None,
    decoder: str = "full",
    reg_target: str = "prior",
    graph: Graph | None = None,
    relaxed: bool = False,
    grad: bool = True,
    key: str = "leaf",
) -> tuple[LossBreakdown, Gradients | None]:
    """Same contract as :func:`vgraph.training.flat_objective`, over tree paths.

    Gumbel noise has one column per tree node; each level is sampled within
    the sibling group of the node picked above (greedy descent for the hard
    sample, product of level-wise relaxed weights for the soft one). ``key``
    selects the decoder embedding, see :meth:`CommunityTree.decoder_map`.
    """
    if reg_target != "prior":
        raise ValueError("the hierarchical model only smooths priors")
    _check_params(params, tree)
    tau = params.tau if tau is None else tau
    w, c = batch.pairs[:, 0], batch.pairs[:, 1]
    B = len(w)
    u = 1.0 / B
    psi = params.psi
    dmap = tree.decoder_map(key)
    psi_leaf = dmap @ psi

    pw, pc = params.phi[w], params.phi[c]
    h = pw * pc
    cond_q, logq = tree.log_probs(h @ psi.T)
    cond_p, logp = tree.log_probs(pw @ psi.T)
    q, p = np.exp(logq), np.exp(logp)
    kl = (q * (logq - logp)).sum(axis=1)

    # level-wise relaxed samples; log Y(leaf) sums the levels along the path
    log_y = []
    log_leaf_y = np.zeros((B, tree.n_leaves))
    for level, b in enumerate(tree.branching, 1):
        s = (cond_q[level - 1] + batch.noise[:, tree.level_slice(level)]) / tau
        ly = log_softmax(s.reshape(B, -1, b), axis=-1).reshape(B, -1)
        log_y.append(ly)
        log_leaf_y = log_leaf_y + np.repeat(ly, tree.n_leaves // ly.shape[1], axis=1)
    leaf_y = np.exp(log_leaf_y)
    if relaxed:
        mix = leaf_y
        hard_index = None
        psi_tilde = leaf_y @ psi_leaf
    else:
        hard_index = tree.greedy_leaf(log_y)
        mix = np.zeros_like(leaf_y)
        mix[np.arange(B), hard_index] = 1.0
        psi_tilde = psi_leaf[hard_index]

    negatives = batch.negatives if decoder == "negative" else None
    recon, g_pt, v_idx, v_vals = decode(
        params.varphi, psi_tilde, c, -u, negatives, psi_leaf, hard_index
    )

    use_reg = lam > 0 and batch.alpha is not None
    reg = np.zeros(B)
    if use_reg:
        cond_c, logpc = tree.log_probs(pc @ psi.T)
        prob_c = np.exp(logpc)
        diff = prob_c - p
        reg = lam * batch.alpha * (diff**2).sum(axis=1)

    loss = LossBreakdown(
        recon=float(recon.mean()),
        kl=float(kl.mean()),
        reg=float(reg.sum() / B),
        total=float((-recon + kl + reg).mean()),
    )
    if not grad:
        return loss, None

    # sample path: decoder -> leaf weights -> level-wise log-softmaxes
    g_leaf_y = (g_pt @ psi_leaf.T) * leaf_y
    g_log_y = tree.leaf_to_levels(g_leaf_y)
    g_cond_q = []
    for level, b in enumerate(tree.branching, 1):
        ly = log_y[level - 1].reshape(B, -1, b)
        g = g_log_y[level - 1].reshape(B, -1, b)
        g_s = g - np.exp(ly) * g.sum(axis=2, keepdims=True)
        g_cond_q.append(g_s.reshape(B, -1) / tau)

    # KL(q || p) over leaves, through the factorized log-probs
    g_logq = u * q * ((logq - logp) + 1.0)
    g_logp = -u * q
    if use_reg:
        e = (2.0 * u * lam * batch.alpha)[:, None] * diff
        g_logp = g_logp - e * p
        g_a_c = tree.group_backward(cond_c, tree.leaf_to_levels(e * prob_c))
    g_cond_q = [a + b for a, b in zip(g_cond_q, tree.leaf_to_levels(g_logq))]
    g_a = tree.group_backward(cond_q, g_cond_q)
    g_b = tree.group_backward(cond_p, tree.leaf_to_levels(g_logp))

    g_psi = g_a.T @ h + g_b.T @ pw
    g_psi += dmap.T @ (mix.T @ g_pt)
    g_h = g_a @ psi
    g_pw = g_h * pc + g_b @ psi
    g_pc = g_h * pw
    if use_reg:
        g_psi += g_a_c.T @ pc
        g_pc += g_a_c @ psi

    d = params.dim
    grads = Gradients(
        phi=reduce_rows([w, c], [g_pw, g_pc], d),
        varphi=reduce_rows(v_idx, v_vals, d),
        psi=g_psi,
    )
    return loss, grads


def train_hierarchical(g: Graph, config: TrainConfig, tree: CommunityTree, **kwargs) -> TrainedModel:
    """The flat training loop with one embedding and one noise column per tree node.

    ``config.k`` is ignored in favour of the tree's node count.
    """
    if config.reg_target != "prior":
        raise ValueError("the hierarchical model only smooths priors")
    return train(
        g,
        config,
        objective=partial(hierarchical_objective, tree=tree, key=config.tree_decoder),
        n_communities=tree.n_nodes,
        n_categories=tree.n_nodes,
        **kwargs,
    )


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def leaf_memberships(params: ModelParams, tree: CommunityTree, g: Graph) -> np.ndarray:
    """Neighbor-averaged leaf posteriors; NaN rows for isolated nodes."""
    deg = g.degrees
    src = np.repeat(np.arange(g.node_count), deg)
    q = leaf_posterior_matrix(params, tree, np.stack([src, g.indices], axis=1))
    out = np.full((g.node_count, tree.n_leaves), np.nan)
    has = deg > 0
    if len(q):
        out[has] = np.add.reduceat(q, g.indptr[:-1][has], axis=0) / deg[has, None]
    return out


def assign_hierarchical(
    params: ModelParams, tree: CommunityTree, g: Graph, overlapping: bool = False
) -> list[CommunitySet]:
    """Communities at every level, coarsest first.

    Leaves are assigned with the flat rules (membership argmax, or edge
    posterior argmax when ``overlapping``); each coarser level merges leaves
    into their ancestor.
    """
    if overlapping:
        q = leaf_posterior_matrix(params, tree, g.edges)
        leaves = assign_from_edges(g, q.argmax(axis=1), tree.n_leaves)
    else:
        leaves = assign_from_memberships(leaf_memberships(params, tree, g), tree.n_leaves)
    out = [
        leaves.map_communities(tree.ancestor_map(level), tree.level_sizes[level - 1])
        for level in range(1, tree.depth)
    ]
    out.append(leaves)
    return out
