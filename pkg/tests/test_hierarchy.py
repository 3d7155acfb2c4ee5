import math
from functools import partial
from itertools import product

import numpy as np
import pytest

from vgraph import oracle
from vgraph.graph import CommunitySet, generate_sbm
from vgraph.hierarchy import (
    CommunityTree,
    assign_hierarchical,
    hierarchical_edge_likelihood,
    hierarchical_objective,
    leaf_memberships,
    path_prior,
    train_hierarchical,
)
from vgraph.model import ModelParams, assign_nonoverlapping, assign_overlapping, node_memberships, prior_distribution
from vgraph.training import TrainConfig, train
from vgraph.verify import gradient_error, random_graph, random_params


def tree_params(rng, tree, v=5, d=3):
    return random_params(rng, v, tree.n_nodes, d)


def explicit_leaf_prior(params, tree, w):
    """Walk every root-to-leaf path and multiply sibling-group softmaxes."""
    logits = [sum(a * b for a, b in zip(params.phi[w], row)) for row in params.psi]
    out = []
    for path in product(*(range(b) for b in tree.branching)):
        prob, parent = 1.0, 0
        for level, (b, choice) in enumerate(zip(tree.branching, path)):
            start = tree.offsets[level] + parent * b
            group = logits[start : start + b]
            top = max(group)
            z = sum(math.exp(x - top) for x in group)
            prob *= math.exp(group[choice] - top) / z
            parent = parent * b + choice
        out.append(prob)
    return np.array(out)


# -- tree layout -------------------------------------------------------------


def test_tree_layout():
    t = CommunityTree.from_spec("3,2")
    assert t.spec() == "3,2"
    assert (t.depth, t.n_leaves, t.n_nodes, t.leaf_offset) == (2, 6, 9, 3)
    assert t.ancestor_map(1).tolist() == [0, 0, 1, 1, 2, 2]
    assert t.ancestor_map(2).tolist() == list(range(6))


@pytest.mark.parametrize("spec", ["", "3,0", "a,2"])
def test_bad_tree_spec(spec):
    with pytest.raises(ValueError):
        CommunityTree.from_spec(spec)


def test_decoder_maps():
    t = CommunityTree((2, 2))
    leaf = t.decoder_map("leaf")
    path = t.decoder_map("path")
    assert np.array_equal(leaf, np.hstack([np.zeros((4, 2)), np.eye(4)]))
    assert path[3].tolist() == [0, 1, 0, 0, 0, 1]
    with pytest.raises(ValueError):
        t.decoder_map("root")


def test_wrong_psi_size_rejected():
    with pytest.raises(ValueError):
        path_prior(random_params(np.random.default_rng(0), 3, 4, 2), CommunityTree((3, 2)), 0)


# -- path prior --------------------------------------------------------------


def test_depth_one_prior_is_flat():
    rng = np.random.default_rng(0)
    p = random_params(rng, 6, 4, 3)
    t = CommunityTree((4,))
    for w in range(6):
        assert np.max(np.abs(path_prior(p, t, w) - prior_distribution(p, w))) <= 1e-15


@pytest.mark.parametrize("branching", [(2, 2), (3, 2), (2, 3, 2)])
def test_path_prior_normalized_and_enumerated(branching):
    rng = np.random.default_rng(1)
    t = CommunityTree(branching)
    p = tree_params(rng, t)
    for w in range(5):
        pr = path_prior(p, t, w)
        assert abs(pr.sum() - 1) <= 1e-12 and np.all(pr >= 0)
        assert np.max(np.abs(pr - explicit_leaf_prior(p, t, w))) <= 1e-12


def test_path_prior_hand_case():
    # level 1: (0, ln 3) -> 1/4, 3/4; children: (0, ln 2) -> 1/3, 2/3 and (ln 4, 0) -> 4/5, 1/5
    logits = np.array([0, math.log(3), 0, math.log(2), math.log(4), 0])[:, None]
    p = ModelParams(np.ones((1, 1)), np.zeros((1, 1)), logits)
    got = path_prior(p, CommunityTree((2, 2)), 0)
    assert got == pytest.approx([1 / 12, 2 / 12, 3 / 5, 3 / 20], abs=1e-15)


def test_marginals_consistent_with_conditionals():
    rng = np.random.default_rng(2)
    t = CommunityTree((3, 2, 2))
    p = tree_params(rng, t, d=4)
    cond, leaf = t.log_probs(p.psi @ p.phi[1])
    leaf = np.exp(leaf[0])
    for level in (1, 2):
        # product of conditionals down to each level-`level` node
        prod = np.exp(sum(np.repeat(c[0], t.level_sizes[level - 1] // len(c[0])) for c in cond[:level]))
        under = leaf.reshape(t.level_sizes[level - 1], -1).sum(axis=1)
        assert np.max(np.abs(prod - under)) <= 1e-12


# -- likelihood --------------------------------------------------------------


def test_depth_one_likelihood_matches_oracle():
    rng = np.random.default_rng(3)
    p = random_params(rng, 7, 3, 4)
    t = CommunityTree((3,))
    for w, c in [(0, 1), (4, 6), (2, 2)]:
        assert hierarchical_edge_likelihood(p, t, w, c) == pytest.approx(math.exp(oracle.exact_edge_loglik(p, w, c)), abs=1e-12)


def test_zero_params_likelihood_uniform():
    t = CommunityTree((2, 3))
    p = ModelParams(np.zeros((5, 2)), np.zeros((5, 2)), np.zeros((t.n_nodes, 2)))
    for key in ("leaf", "path"):
        assert hierarchical_edge_likelihood(p, t, 0, 3, key) == pytest.approx(0.2, abs=1e-15)


@pytest.mark.parametrize("key", ["leaf", "path"])
def test_likelihood_brute_force(key):
    rng = np.random.default_rng(4)
    t = CommunityTree((2, 2))
    p = tree_params(rng, t, v=6)
    w, c = 1, 4
    prior = explicit_leaf_prior(p, t, w)
    total = 0.0
    for leaf in range(4):
        if key == "leaf":
            emb = p.psi[t.leaf_offset + leaf]
        else:
            emb = p.psi[leaf // 2] + p.psi[t.leaf_offset + leaf]
        scores = [float(np.dot(emb, p.varphi[v])) for v in range(6)]
        top = max(scores)
        dec = math.exp(scores[c] - top) / sum(math.exp(s - top) for s in scores)
        total += prior[leaf] * dec
    assert hierarchical_edge_likelihood(p, t, w, c, key) == pytest.approx(total, abs=1e-12)


# -- objective ---------------------------------------------------------------


@pytest.mark.parametrize("key", ["leaf", "path"])
@pytest.mark.parametrize("branching", [(2, 2), (3, 2), (2, 2, 2)])
def test_gradients_match_finite_differences(key, branching):
    rng = np.random.default_rng(5)
    t = CommunityTree(branching)
    obj = partial(hierarchical_objective, tree=t, key=key)
    for lam in (0.0, 10.0):
        assert gradient_error(rng, objective=obj, n_categories=t.n_nodes, lam=lam) <= 1e-4


def test_membership_smoothing_not_supported():
    with pytest.raises(ValueError):
        train_hierarchical(random_graph(np.random.default_rng(0), 5), TrainConfig(k=2, reg_target="membership"), CommunityTree((2,)))


@pytest.mark.parametrize("decoder", ["full", "negative"])
def test_depth_one_training_matches_flat(decoder):
    g, _ = generate_sbm(60, 3, 0.3, 0.02, seed=1)
    cfg = TrainConfig(k=3, d=8, iters=150, batch_edges=40, eval_every=25, lam=100.0, seed=3, decoder=decoder)
    flat = train(g, cfg)
    tree = train_hierarchical(g, cfg, CommunityTree((3,)))
    assert np.max(np.abs(np.subtract(flat.batch_losses, tree.batch_losses))) <= 1e-9
    assert np.max(np.abs(flat.final.phi - tree.final.phi)) <= 1e-9


# -- extraction --------------------------------------------------------------


def test_depth_one_assignment_is_flat():
    rng = np.random.default_rng(6)
    g = random_graph(rng, 9)
    p = random_params(rng, 9, 3, 4)
    t = CommunityTree((3,))
    (flat,) = assign_hierarchical(p, t, g)
    assert flat.labels().tolist() == assign_nonoverlapping(p, g).labels().tolist()
    (over,) = assign_hierarchical(p, t, g, overlapping=True)
    assert over.membership == assign_overlapping(p, g).membership
    assert np.allclose(leaf_memberships(p, t, g), node_memberships(p, g), atol=1e-15)


def test_leaf_to_ancestor_mapping():
    t = CommunityTree((2, 2))
    leaves = CommunitySet.from_labels([3, 3, 0, 2], 4)
    level1 = leaves.map_communities(t.ancestor_map(1), 2)
    assert level1.labels().tolist() == [1, 1, 0, 1]


def test_levels_nest():
    rng = np.random.default_rng(7)
    g = random_graph(rng, 12)
    t = CommunityTree((2, 3))
    p = tree_params(rng, t, v=12)
    coarse, fine = assign_hierarchical(p, t, g)
    assert np.array_equal(coarse.labels(), fine.labels() // 3)
