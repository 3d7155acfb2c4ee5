"""Randomized cross-checks of the fast code against the reference oracles."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import oracle
from .graph import Graph, jaccard_weights
from .model import ModelParams, decoder_distribution, init_params, node_memberships, prior_distribution
from .training import Batch, flat_objective


def random_params(rng: np.random.Generator, v: int, k: int, d: int, scale: float = 1.0) -> ModelParams:
    return ModelParams(
        rng.normal(0, scale, (v, d)), rng.normal(0, scale, (v, d)), rng.normal(0, scale, (k, d))
    )


def random_graph(rng: np.random.Generator, n: int, p: float = 0.4) -> Graph:
    """Connected-ish random graph on ``n`` nodes (a path keeps every node non-isolated)."""
    edges = {(i, i + 1) for i in range(n - 1)}
    for i in range(n):
        for j in range(i + 2, n):
            if rng.random() < p:
                edges.add((i, j))
    return Graph.from_edges(np.array(sorted(edges), dtype=np.int64), n)


def check_bound(rng: np.random.Generator) -> tuple[float, float]:
    """Returns (elbo - loglik, |bayes elbo - loglik|) for one random instance."""
    v = int(rng.integers(2, 51))
    k = int(rng.integers(1, 9))
    params = random_params(rng, v, k, int(rng.integers(1, 9)))
    w, c = (int(x) for x in rng.integers(0, v, 2))
    ll = oracle.exact_edge_loglik(params, w, c)
    elbo = oracle.exact_elbo(params, w, c)
    tight = oracle.exact_elbo(params, w, c, q=oracle.bayes_posterior(params, w, c))
    return elbo - ll, abs(tight - ll)


def check_marginal(rng: np.random.Generator) -> float:
    v, k = int(rng.integers(2, 30)), int(rng.integers(1, 8))
    params = random_params(rng, v, k, 4)
    w, c = (int(x) for x in rng.integers(0, v, 2))
    fast = sum(prior_distribution(params, w)[j] * decoder_distribution(params, j)[c] for j in range(k))
    return abs(fast - math.exp(oracle.exact_edge_loglik(params, w, c)))


def check_memberships(rng: np.random.Generator) -> float:
    g = random_graph(rng, 10)
    params = random_params(rng, 10, int(rng.integers(1, 6)), 4)
    return float(np.abs(node_memberships(params, g) - oracle.brute_force_memberships(params, g)).max())


def gradient_error(
    rng: np.random.Generator,
    n: int = 8,
    k: int = 3,
    d: int = 4,
    h: float = 1e-5,
    objective: Callable | None = None,
    n_categories: int | None = None,
    **kwargs,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Uses the fully relaxed objective with fixed Gumbel noise. Relative error
    is ``|a - f| / max(|a|, |f|, 1e-6)`` so entries near zero are judged on
    an absolute scale.
    """
    objective = objective or flat_objective
    g = random_graph(rng, n)
    n_categories = n_categories or k
    params = init_params(n, n_categories, d, rng)
    pairs = g.ordered_pairs()
    lam = kwargs.pop("lam", 10.0)
    batch = Batch(pairs, rng.gumbel(size=(len(pairs), n_categories)), jaccard_weights(g, pairs))
    if kwargs.get("decoder") == "negative":
        batch.negatives = rng.integers(0, n, (len(pairs), 3))
    kw = dict(lam=lam, tau=0.7, graph=g, relaxed=True, **kwargs)
    _, grads = objective(params, batch, **kw)
    dense = grads.dense(params)
    worst = 0.0
    for name in ("phi", "varphi", "psi"):
        mat = getattr(params, name)
        for idx in np.ndindex(mat.shape):
            orig = mat[idx]
            mat[idx] = orig + h
            up = objective(params, batch, grad=False, **kw)[0].total
            mat[idx] = orig - h
            down = objective(params, batch, grad=False, **kw)[0].total
            mat[idx] = orig
            fd = (up - down) / (2 * h)
            a = dense[name][idx]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst


def run_checks(instances: int = 20, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    out = []
    bounds = [check_bound(rng) for _ in range(instances)]
    slack = max(b[0] for b in bounds)
    gap = max(b[1] for b in bounds)
    out.append(("elbo <= log-likelihood", slack <= 1e-12, f"max elbo - loglik = {slack:.3e}"))
    out.append(("bound tight at true posterior", gap <= 1e-9, f"max gap = {gap:.3e}"))
    marg = max(check_marginal(rng) for _ in range(instances))
    out.append(("marginal likelihood", marg <= 1e-12, f"max abs diff = {marg:.3e}"))
    memb = max(check_memberships(rng) for _ in range(instances))
    out.append(("node memberships", memb <= 1e-12, f"max abs diff = {memb:.3e}"))
    grad = max(gradient_error(rng) for _ in range(max(1, instances // 4)))
    out.append(("gradients vs finite differences", grad <= 1e-4, f"max rel err = {grad:.3e}"))
    return out
