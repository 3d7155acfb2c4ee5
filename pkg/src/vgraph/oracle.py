"""Slow reference computations by direct enumeration.

Everything here is written with plain Python loops in a fixed order and
shares no arithmetic with the vectorized code it checks. Only meant for
tiny instances (a few dozen nodes, a handful of communities).
"""

from __future__ import annotations

import math

import numpy as np

from .graph import Graph
from .model import ModelParams


def _dot(x, y) -> float:
    s = 0.0
    for a, b in zip(x, y):
        s += float(a) * float(b)
    return s


def _softmax(logits: list[float]) -> list[float]:
    top = max(logits)
    e = [math.exp(v - top) for v in logits]
    total = 0.0
    for v in e:
        total += v
    return [v / total for v in e]


def prior(params: ModelParams, w: int) -> list[float]:
    return _softmax([_dot(params.phi[w], params.psi[j]) for j in range(params.k)])


def decoder(params: ModelParams, j: int) -> list[float]:
    return _softmax([_dot(params.psi[j], params.varphi[v]) for v in range(params.node_count)])


def posterior(params: ModelParams, w: int, c: int) -> list[float]:
    h = [float(a) * float(b) for a, b in zip(params.phi[w], params.phi[c])]
    return _softmax([_dot(h, params.psi[j]) for j in range(params.k)])


def bayes_posterior(params: ModelParams, w: int, c: int) -> np.ndarray:
    """True posterior ``p(j | w, c)`` proportional to ``prior_j * decoder_j(c)``."""
    p = prior(params, w)
    joint = [p[j] * decoder(params, j)[c] for j in range(params.k)]
    total = 0.0
    for v in joint:
        total += v
    return np.array([v / total for v in joint])


def exact_edge_loglik(params: ModelParams, w: int, c: int) -> float:
    """``log sum_j prior(w)_j * decoder(j)_c`` with the full softmax decoder."""
    p = prior(params, w)
    total = 0.0
    for j in range(params.k):
        total += p[j] * decoder(params, j)[c]
    return math.log(total)


def exact_elbo(params: ModelParams, w: int, c: int, q: np.ndarray | None = None) -> float:
    """Expected log-decoder under ``q`` minus ``KL(q || prior)``, by enumeration.

    ``q`` defaults to the model's variational posterior for the pair.
    """
    q = posterior(params, w, c) if q is None else [float(v) for v in q]
    p = prior(params, w)
    value = 0.0
    for j in range(params.k):
        if q[j] == 0.0:
            continue
        value += q[j] * math.log(decoder(params, j)[c])
        value -= q[j] * (math.log(q[j]) - math.log(p[j]))
    return value


def brute_force_memberships(params: ModelParams, g: Graph) -> np.ndarray:
    """Per-node average of edge posteriors over neighbors; NaN rows for isolated nodes."""
    out = np.full((g.node_count, params.k), np.nan)
    for w in range(g.node_count):
        nbrs = [int(c) for c in g.neighbors(w)]
        if not nbrs:
            continue
        acc = [0.0] * params.k
        for c in nbrs:
            q = posterior(params, w, c)
            for j in range(params.k):
                acc[j] += q[j]
        out[w] = [v / len(nbrs) for v in acc]
    return out
