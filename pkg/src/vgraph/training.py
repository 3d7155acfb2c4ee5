"""Loss assembly, hand-derived gradients, Adam and the training loop.

The per-pair loss is ``-recon + KL(q || prior) + lam * alpha * ||p_c - p_w||^2``
and batch losses are means over ordered pairs. The reconstruction term is
evaluated at a hard Gumbel-max sample while its gradient flows through the
relaxed sample (straight-through); ``relaxed=True`` evaluates the relaxed
objective itself, which is what finite differences can check.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import expit

from .graph import Graph, NoiseDistribution, jaccard_weights, sample_negatives
from .model import (
    PROB_FLOOR,
    ModelParams,
    init_params,
    log_sigmoid,
    log_softmax,
    posterior_distribution,
    prior_distribution,
    softmax,
)

logger = logging.getLogger(__name__)

DEFAULT_SMOOTHNESS = 100.0
FULL_SOFTMAX_MAX_NODES = 10_000
EVAL_EDGE_THRESHOLD = 25_000
EVAL_SAMPLE_PAIRS = 50_000


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    k: int
    d: int = 128
    lr0: float = 0.05
    decay: float = 0.99
    decay_every: int = 100
    iters: int = 5000
    batch_edges: int = 5000
    lam: float = 0.0
    m_neg: int = 5
    tau: float = 1.0
    tau_end: float | None = None
    seed: int = 0
    eval_every: int = 100
    decoder: str = "auto"
    reg_target: str = "prior"
    shared_negatives: bool = False
    negative_pool: int = 1024
    dtype: str = "float64"
    tree_decoder: str = "leaf"

    def __post_init__(self):
        if self.k < 1 or self.d < 1:
            raise ValueError("k and d must be at least 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.iters < 0 or self.batch_edges < 0 or self.m_neg < 0:
            raise ValueError("iters, batch_edges and m_neg must be nonnegative")
        if not self.tau > 0 or (self.tau_end is not None and not self.tau_end > 0):
            raise ValueError("temperatures must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.decoder not in ("auto", "full", "negative"):
            raise ValueError(f"unknown decoder {self.decoder!r}")
        if self.reg_target not in ("prior", "membership"):
            raise ValueError(f"unknown reg_target {self.reg_target!r}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.negative_pool < 1:
            raise ValueError("negative_pool must be at least 1")
        if self.tree_decoder not in ("leaf", "path"):
            raise ValueError(f"tree_decoder must be leaf or path, not {self.tree_decoder!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, not {self.dtype!r}")

    def decoder_for(self, node_count: int) -> str:
        if self.decoder != "auto":
            return self.decoder
        return "full" if node_count <= FULL_SOFTMAX_MAX_NODES else "negative"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    reg: float
    total: float


@dataclass
class RowGrad:
    """Gradient restricted to ``rows`` (sorted, unique) of a matrix."""

    rows: np.ndarray
    values: np.ndarray

    def dense(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape)
        out[self.rows] = self.values
        return out


@dataclass
class Gradients:
    phi: RowGrad
    varphi: RowGrad
    psi: np.ndarray

    def dense(self, params: ModelParams) -> dict[str, np.ndarray]:
        return {
            "phi": self.phi.dense(params.phi.shape),
            "varphi": self.varphi.dense(params.varphi.shape),
            "psi": self.psi,
        }


@dataclass
class Batch:
    """Ordered pairs plus all randomness needed to evaluate the loss on them."""

    pairs: np.ndarray
    noise: np.ndarray
    alpha: np.ndarray | None = None
    negatives: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.pairs)


def reduce_rows(index: list[np.ndarray], values: list[np.ndarray], width: int) -> RowGrad:
    """Sum value rows sharing an index, in a fixed order."""
    if not index:
        return RowGrad(np.zeros(0, dtype=np.int64), np.zeros((0, width)))
    idx = np.concatenate(index)
    vals = np.concatenate(values)
    order = np.argsort(idx, kind="stable")
    idx = idx[order]
    rows, start = np.unique(idx, return_index=True)
    return RowGrad(rows, np.add.reduceat(vals[order], start, axis=0))


# ---------------------------------------------------------------------------
# closed-form pieces
# ---------------------------------------------------------------------------


def kl_categorical(q: np.ndarray, p: np.ndarray) -> float:
    """``sum_k q_k (log q_k - log p_k)`` with ``0 log 0 = 0``; ``p`` floored at 1e-10."""
    q = np.asarray(q, dtype=np.float64)
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    nz = q > 0
    return float(max(np.sum(q[nz] * (np.log(q[nz]) - np.log(p[nz]))), 0.0))


def elbo_terms(
    params: ModelParams,
    w: int,
    c: int,
    sample: tuple[np.ndarray, np.ndarray],
    negatives: np.ndarray | None = None,
) -> tuple[float, float]:
    """Reconstruction at the hard sample and the closed-form KL for one pair.

    With ``negatives`` the reconstruction is the negative-sampling surrogate
    instead of the full-softmax log-likelihood.
    """
    _, hard = sample
    j = int(np.argmax(hard))
    if negatives is None:
        logits = params.varphi @ params.psi[j]
        recon = float(log_softmax(logits)[c])
    else:
        negatives = np.asarray(negatives, dtype=np.int64)
        recon = float(
            log_sigmoid(params.varphi[c] @ params.psi[j])
            + log_sigmoid(-(params.varphi[negatives] @ params.psi[j])).sum()
        )
    q = posterior_distribution(params, w, c)
    p = prior_distribution(params, w)
    return recon, kl_categorical(q, p)


def smoothness_penalty(
    params: ModelParams, g: Graph, batch: np.ndarray, lam: float
) -> float:
    """``lam * sum alpha_wc * ||prior(c) - prior(w)||^2`` over the batch pairs."""
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 2)
    if lam == 0 or len(batch) == 0:
        return 0.0
    alpha = jaccard_weights(g, batch)
    logits = params.phi @ params.psi.T
    pw = softmax(logits[batch[:, 0]])
    pc = softmax(logits[batch[:, 1]])
    return float(lam * np.sum(alpha * ((pc - pw) ** 2).sum(axis=1)))


def lr_at(iteration: int, config: TrainConfig) -> float:
    return config.lr0 * config.decay ** (iteration // config.decay_every)


def tau_at(iteration: int, config: TrainConfig) -> float:
    if config.tau_end is None:
        return config.tau
    frac = iteration / max(config.iters - 1, 1)
    return config.tau + (config.tau_end - config.tau) * min(frac, 1.0)


# ---------------------------------------------------------------------------
# decoder: reconstruction log-likelihood and its gradients
# ---------------------------------------------------------------------------


def decode(
    varphi: np.ndarray,
    psi_tilde: np.ndarray,
    c: np.ndarray,
    upstream: float,
    negatives: np.ndarray | None = None,
    candidates: np.ndarray | None = None,
    hard_index: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, list, list]:
    """Log-likelihood of context ``c`` given community vectors ``psi_tilde``.

    Returns per-pair reconstruction values, ``upstream * dR/dpsi_tilde`` and
    row fragments of ``upstream * dR/dvarphi``. When every ``psi_tilde`` row
    is one of ``candidates`` (``hard_index`` gives which), the full softmax is
    computed once per candidate instead of once per pair.
    """
    V, d = varphi.shape
    if negatives is not None:
        if negatives.shape[0] == 1 and len(c) != 1:
            negatives = np.broadcast_to(negatives, (len(c), negatives.shape[1]))
        vc = varphi[c]
        vn = varphi[negatives]
        s_pos = np.einsum("bd,bd->b", vc, psi_tilde)
        s_neg = np.einsum("bmd,bd->bm", vn, psi_tilde)
        recon = log_sigmoid(s_pos) + log_sigmoid(-s_neg).sum(axis=1)
        a = upstream * expit(-s_pos)
        bm = upstream * expit(s_neg)
        g_pt = a[:, None] * vc - np.einsum("bm,bmd->bd", bm, vn)
        idx = [c, negatives.ravel()]
        vals = [a[:, None] * psi_tilde, (-bm[:, :, None] * psi_tilde[:, None, :]).reshape(-1, d)]
        return recon, g_pt, idx, vals

    if hard_index is not None:
        logp = log_softmax(candidates @ varphi.T)
        prob = np.exp(logp)
        recon = logp[hard_index, c]
        expected = prob @ varphi
        g_pt = upstream * (varphi[c] - expected[hard_index])
        counts = np.bincount(hard_index, minlength=len(candidates)) * upstream
        idx = [c, np.arange(V)]
        vals = [upstream * psi_tilde, -prob.T @ (counts[:, None] * candidates)]
        return recon, g_pt, idx, vals

    logp = log_softmax(psi_tilde @ varphi.T)
    prob = np.exp(logp)
    recon = logp[np.arange(len(c)), c]
    g_pt = upstream * (varphi[c] - prob @ varphi)
    idx = [c, np.arange(V)]
    vals = [upstream * psi_tilde, -upstream * (prob.T @ psi_tilde)]
    return recon, g_pt, idx, vals


def softmax_backward(prob: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``softmax(x)`` back to ``x`` (row-wise)."""
    return prob * (grad - (prob * grad).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# flat objective
# ---------------------------------------------------------------------------


def _membership_penalty(
    params: ModelParams,
    g: Graph,
    w: np.ndarray,
    c: np.ndarray,
    coef: np.ndarray,
    grad: bool,
):
    """Smoothness on neighbor-averaged posteriors instead of priors.

    ``coef`` is ``lam * alpha`` per pair. Returns the per-pair penalty and,
    if requested, (phi row fragments, psi gradient) scaled by ``1/B``.
    """
    psi = params.psi
    nodes, inv = np.unique(np.concatenate([w, c]), return_inverse=True)
    deg = g.degrees[nodes]
    src = np.repeat(nodes, deg)
    dst = np.concatenate([g.indices[g.indptr[v] : g.indptr[v + 1]] for v in nodes])
    hh = params.phi[src] * params.phi[dst]
    qq = softmax(hh @ psi.T)
    starts = np.concatenate([[0], np.cumsum(deg)[:-1]])
    memb = np.add.reduceat(qq, starts, axis=0) / deg[:, None]
    iw, ic = inv[: len(w)], inv[len(w) :]
    diff = memb[ic] - memb[iw]
    penalty = coef * (diff**2).sum(axis=1)
    if not grad:
        return penalty, None, None
    e = (2.0 / len(w)) * coef[:, None] * diff
    g_memb = np.zeros_like(memb)
    np.add.at(g_memb, ic, e)
    np.add.at(g_memb, iw, -e)
    g_qq = np.repeat(g_memb / deg[:, None], deg, axis=0)
    g_aa = softmax_backward(qq, g_qq)
    g_hh = g_aa @ psi
    frags = ([src, dst], [g_hh * params.phi[dst], g_hh * params.phi[src]])
    return penalty, frags, g_aa.T @ hh


def flat_objective(
    params: ModelParams,
    batch: Batch,
    *,
    lam: float = 0.0,
    tau: float | None = None,
    decoder: str = "full",
    reg_target: str = "prior",
    graph: Graph | None = None,
    relaxed: bool = False,
    grad: bool = True,
) -> tuple[LossBreakdown, Gradients | None]:
    tau = params.tau if tau is None else tau
    w, c = batch.pairs[:, 0], batch.pairs[:, 1]
    B = len(w)
    psi = params.psi
    u = 1.0 / B

    pw, pc = params.phi[w], params.phi[c]
    h = pw * pc
    logq = log_softmax(h @ psi.T)
    q = np.exp(logq)
    logp = log_softmax(pw @ psi.T)
    p = np.exp(logp)
    kl = (q * (logq - logp)).sum(axis=1)

    y = softmax((logq + batch.noise) / tau)
    if relaxed:
        mix = y
        psi_tilde = y @ psi
        hard_index = None
    else:
        hard_index = y.argmax(axis=1)
        mix = np.zeros_like(y)
        mix[np.arange(B), hard_index] = 1.0
        psi_tilde = psi[hard_index]

    negatives = batch.negatives if decoder == "negative" else None
    recon, g_pt, v_idx, v_vals = decode(
        params.varphi, psi_tilde, c, -u, negatives, psi, hard_index
    )

    use_reg = lam > 0 and batch.alpha is not None
    reg = np.zeros(B)
    if use_reg and reg_target == "prior":
        pcv = softmax(pc @ psi.T)
        diff = pcv - p
        reg = lam * batch.alpha * (diff**2).sum(axis=1)
    elif use_reg:
        reg, m_frags, m_psi = _membership_penalty(
            params, graph, w, c, lam * batch.alpha, grad
        )

    loss = LossBreakdown(
        recon=float(recon.mean()),
        kl=float(kl.mean()),
        reg=float(reg.sum() / B),
        total=float((-recon + kl + reg).mean()),
    )
    if not grad:
        return loss, None

    # reconstruction -> relaxed sample -> log q -> posterior logits
    g_y = g_pt @ psi.T
    g_logq = softmax_backward(y, g_y) / tau
    g_a = g_logq - q * g_logq.sum(axis=1, keepdims=True)
    g_a += u * q * ((logq - logp) - kl[:, None])
    g_b = u * (p - q)

    g_psi = mix.T @ g_pt
    phi_idx, phi_vals = [w, c], []
    g_pc_extra = None
    if use_reg and reg_target == "prior":
        e = (2.0 * u * lam * batch.alpha)[:, None] * diff
        g_bc = softmax_backward(pcv, e)
        g_b += softmax_backward(p, -e)
        g_psi += g_bc.T @ pc
        g_pc_extra = g_bc @ psi

    g_h = g_a @ psi
    g_psi += g_a.T @ h + g_b.T @ pw
    phi_vals.append(g_h * pc + g_b @ psi)
    g_pc = g_h * pw
    if g_pc_extra is not None:
        g_pc += g_pc_extra
    phi_vals.append(g_pc)
    if use_reg and reg_target == "membership":
        phi_idx += m_frags[0]
        phi_vals += m_frags[1]
        g_psi += m_psi

    d = params.dim
    grads = Gradients(
        phi=reduce_rows(phi_idx, phi_vals, d),
        varphi=reduce_rows(v_idx, v_vals, d),
        psi=g_psi,
    )
    return loss, grads


# ---------------------------------------------------------------------------
# batches and the public loss / gradient entry points
# ---------------------------------------------------------------------------


def make_batch(
    g: Graph,
    pairs: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    n_categories: int,
    noise_dist: NoiseDistribution | None = None,
    alpha: np.ndarray | None = None,
) -> Batch:
    """Draw Gumbel noise (and negatives if needed) for ``pairs``.

    The draw order (noise, then negatives) is fixed so that runs are
    reproducible across model variants sharing a seed. With
    ``shared_negatives`` the batch draws one pool of ``negative_pool`` noise
    nodes and every pair picks its ``m_neg`` negatives uniformly from it, so
    each negative still follows the noise distribution but the batch touches
    few distinct rows.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    noise = rng.gumbel(size=(len(pairs), n_categories))
    negatives = None
    if config.decoder_for(g.node_count) == "negative":
        noise_dist = noise_dist or NoiseDistribution.from_graph(g)
        shape = (len(pairs), config.m_neg)
        if config.shared_negatives:
            pool = sample_negatives(g, noise_dist, config.negative_pool, rng)
            negatives = pool[rng.integers(0, len(pool), shape)]
        else:
            negatives = sample_negatives(g, noise_dist, shape[0] * shape[1], rng).reshape(shape)
    if config.lam > 0 and alpha is None:
        alpha = jaccard_weights(g, pairs)
    return Batch(pairs, noise, alpha if config.lam > 0 else None, negatives)


def _objective_kwargs(g: Graph, config: TrainConfig, tau: float | None = None) -> dict:
    return dict(
        lam=config.lam,
        tau=config.tau if tau is None else tau,
        decoder=config.decoder_for(g.node_count),
        reg_target=config.reg_target,
        graph=g,
    )


def total_loss(
    params: ModelParams,
    g: Graph,
    batch: np.ndarray | Batch,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    relaxed: bool = False,
) -> LossBreakdown:
    if not isinstance(batch, Batch):
        if len(batch) == 0:
            raise ValueError("batch must be nonempty")
        batch = make_batch(g, batch, config, np.random.default_rng(rng), params.k)
    loss, _ = flat_objective(params, batch, relaxed=relaxed, grad=False, **_objective_kwargs(g, config))
    return loss


def compute_gradients(
    params: ModelParams,
    g: Graph,
    batch: np.ndarray | Batch,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    relaxed: bool = False,
) -> Gradients:
    """Gradients of :func:`total_loss`; pass a prepared :class:`Batch` to fix the noise."""
    if not isinstance(batch, Batch):
        batch = make_batch(g, batch, config, np.random.default_rng(rng), params.k)
    _, grads = flat_objective(params, batch, relaxed=relaxed, **_objective_kwargs(g, config))
    return grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        mats = params.matrices()
        return cls(
            {k: np.zeros_like(a) for k, a in mats.items()},
            {k: np.zeros_like(a) for k, a in mats.items()},
        )


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    rows: np.ndarray | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place; ``rows`` restricts it to those rows."""
    sel = slice(None) if rows is None else rows
    m_new = beta1 * m[sel] + (1 - beta1) * grad
    v_new = beta2 * v[sel] + (1 - beta2) * grad * grad
    m[sel] = m_new
    v[sel] = v_new
    m_hat = m_new / (1 - beta1**step)
    v_hat = v_new / (1 - beta2**step)
    param[sel] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(
    params: ModelParams, grads: Gradients, state: AdamState, lr: float
) -> tuple[ModelParams, AdamState]:
    """One Adam step over all three matrices.

    Node matrices are updated only on rows that received a gradient, which
    is plain Adam whenever every row is touched (full batch, full softmax).
    """
    state.step += 1
    kw = dict(beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    for name, rg in (("phi", grads.phi), ("varphi", grads.varphi)):
        if len(rg.rows):
            adam_update(
                getattr(params, name), rg.values, state.m[name], state.v[name],
                state.step, lr, rows=rg.rows, **kw,
            )
    adam_update(params.psi, grads.psi, state.m["psi"], state.v["psi"], state.step, lr, **kw)
    return params, state


class NegativeSamplingEngine:
    """Compiled flat objective for the negative-sampling decoder.

    Gradients for node rows go into compact slot buffers (one row per node
    the batch reaches), so a step never sweeps a full ``(V, d)`` array.
    """

    def __init__(self, params: ModelParams):
        V, d = params.phi.shape
        self.dim = d
        self.dtype = params.phi.dtype
        self.slot_phi = np.full(V, -1, dtype=np.int64)
        self.slot_varphi = np.full(V, -1, dtype=np.int64)
        self.g_phi = np.zeros((0, d), self.dtype)
        self.g_varphi = np.zeros((0, d), self.dtype)

    @staticmethod
    def supports(decoder: str, reg_target: str, relaxed: bool = False) -> bool:
        return decoder == "negative" and reg_target == "prior" and not relaxed

    def _buffers(self, n_phi: int, n_varphi: int) -> None:
        if len(self.g_phi) < n_phi:
            self.g_phi = np.zeros((n_phi, self.dim), self.dtype)
        if len(self.g_varphi) < n_varphi:
            self.g_varphi = np.zeros((n_varphi, self.dim), self.dtype)

    def _run(self, params: ModelParams, batch: Batch, lam: float, tau: float, grad: bool):
        from . import _kernels

        B = batch.size
        V = params.node_count
        negatives = batch.negatives
        cap_phi = min(V, 2 * B)
        cap_varphi = min(V, B + negatives.size)
        self._buffers(cap_phi, cap_varphi)
        alpha = batch.alpha if (lam > 0 and batch.alpha is not None) else np.zeros(0)
        g_psi = np.zeros_like(params.psi)
        touched_phi = np.empty(cap_phi, dtype=np.int64)
        touched_varphi = np.empty(cap_varphi, dtype=np.int64)
        recon, kl, reg = np.empty(B), np.empty(B), np.empty(B)
        n_phi, n_varphi = _kernels.negative_sampling_pass(
            params.phi, params.varphi, params.psi,
            np.ascontiguousarray(batch.pairs[:, 0]), np.ascontiguousarray(batch.pairs[:, 1]),
            batch.noise, negatives, alpha, float(lam), float(tau), grad,
            self.g_phi, self.g_varphi, g_psi, self.slot_phi, self.slot_varphi,
            touched_phi, touched_varphi, recon, kl, reg,
        )
        loss = LossBreakdown(
            recon=float(recon.mean()),
            kl=float(kl.mean()),
            reg=float(reg.sum() / B),
            total=float((-recon + kl + reg).mean()),
        )
        return loss, (touched_phi, n_phi), (touched_varphi, n_varphi), g_psi

    def _clear(self, phi_rows, varphi_rows) -> None:
        from . import _kernels

        _kernels.clear_rows(self.g_phi, phi_rows[0], phi_rows[1], self.slot_phi)
        _kernels.clear_rows(self.g_varphi, varphi_rows[0], varphi_rows[1], self.slot_varphi)

    @staticmethod
    def _row_grad(buf: np.ndarray, touched: tuple[np.ndarray, int]) -> RowGrad:
        rows, n = touched
        order = np.argsort(rows[:n], kind="stable")
        return RowGrad(rows[:n][order], buf[:n][order].copy())

    def objective(
        self,
        params: ModelParams,
        batch: Batch,
        *,
        lam: float = 0.0,
        tau: float | None = None,
        decoder: str = "negative",
        reg_target: str = "prior",
        graph: Graph | None = None,
        relaxed: bool = False,
        grad: bool = True,
    ) -> tuple[LossBreakdown, Gradients | None]:
        """Drop-in replacement for :func:`flat_objective` on supported settings."""
        if not self.supports(decoder, reg_target, relaxed):
            raise ValueError("engine only handles the hard negative-sampling objective with prior smoothing")
        tau = params.tau if tau is None else tau
        loss, t_phi, t_varphi, g_psi = self._run(params, batch, lam, tau, grad)
        if not grad:
            return loss, None
        grads = Gradients(
            self._row_grad(self.g_phi, t_phi), self._row_grad(self.g_varphi, t_varphi), g_psi
        )
        self._clear(t_phi, t_varphi)
        return loss, grads

    def step(
        self, params: ModelParams, batch: Batch, state: AdamState, lr: float, lam: float, tau: float
    ) -> LossBreakdown:
        """Loss on ``batch`` followed by an in-place Adam update on touched rows."""
        from . import _kernels

        loss, t_phi, t_varphi, g_psi = self._run(params, batch, lam, tau, True)
        if not math.isfinite(loss.total):
            self._clear(t_phi, t_varphi)
            return loss
        state.step += 1
        b1, b2 = state.beta1, state.beta2
        c1 = 1 - b1**state.step
        c2 = 1 - b2**state.step
        step_size = lr * math.sqrt(c2) / c1
        eps_hat = state.eps * math.sqrt(c2)
        _kernels.adam_rows(params.phi, state.m["phi"], state.v["phi"], self.g_phi, t_phi[0],
                           t_phi[1], self.slot_phi, step_size, b1, b2, eps_hat)
        _kernels.adam_rows(params.varphi, state.m["varphi"], state.v["varphi"], self.g_varphi,
                           t_varphi[0], t_varphi[1], self.slot_varphi, step_size, b1, b2, eps_hat)
        adam_update(params.psi, g_psi, state.m["psi"], state.v["psi"], state.step, lr,
                    beta1=b1, beta2=b2, eps=state.eps)
        return loss


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class LossRecord:
    iteration: int
    recon: float
    kl: float
    reg: float
    total: float
    lr: float


@dataclass
class TrainedModel:
    final: ModelParams
    best: ModelParams
    history: list[LossRecord]
    config: TrainConfig
    best_iteration: int = 0
    batch_losses: list[float] = field(default_factory=list)

    @property
    def best_loss(self) -> float:
        return min(r.total for r in self.history)


Objective = Callable[..., tuple[LossBreakdown, "Gradients | None"]]


def train(
    g: Graph,
    config: TrainConfig,
    *,
    objective: Objective | None = None,
    n_communities: int | None = None,
    n_categories: int | None = None,
    callback: Callable[[int, LossRecord], None] | None = None,
) -> TrainedModel:
    """Adam on sampled batches of ordered pairs, keeping the lowest-loss snapshot.

    Every ``eval_every`` iterations (and at the end) the loss is measured on
    all ordered pairs, or on a fixed 50k-pair sample for graphs above 25k
    edges, with noise and negatives frozen across evaluations so snapshots
    are compared on equal terms. ``objective``/``n_communities``/
    ``n_categories`` let the hierarchical model reuse this loop.
    """
    if g.edge_count == 0:
        raise ValueError("cannot train on a graph without edges")
    objective = objective or flat_objective
    n_communities = n_communities or config.k
    n_categories = n_categories or n_communities
    rng = np.random.default_rng(config.seed)
    params = init_params(
        g.node_count, n_communities, config.d, rng, tau=config.tau, dtype=config.dtype
    )

    pairs = g.ordered_pairs()
    n_pairs = len(pairs)
    alpha = jaccard_weights(g, pairs) if config.lam > 0 else None
    decoder = config.decoder_for(g.node_count)
    noise_dist = NoiseDistribution.from_graph(g) if decoder == "negative" else None
    full_batch = config.batch_edges == 0 or config.batch_edges >= n_pairs

    eval_rng = np.random.default_rng([config.seed, 1])
    if g.edge_count > EVAL_EDGE_THRESHOLD:
        eval_idx = eval_rng.choice(n_pairs, size=min(EVAL_SAMPLE_PAIRS, n_pairs), replace=False)
    else:
        eval_idx = np.arange(n_pairs)
    # per-pair negatives here even when training shares them: less variance
    eval_batch = make_batch(
        g, pairs[eval_idx], replace(config, shared_negatives=False), eval_rng, n_categories, noise_dist,
        None if alpha is None else alpha[eval_idx],
    )

    state = AdamState.zeros(params)
    engine = None
    if objective is flat_objective and NegativeSamplingEngine.supports(decoder, config.reg_target):
        engine = NegativeSamplingEngine(params)
        eval_objective = engine.objective
    else:
        eval_objective = objective
    history: list[LossRecord] = []
    batch_losses: list[float] = []
    best = params.copy()
    best_iter = 0
    best_total = math.inf

    def record(it: int) -> None:
        nonlocal best, best_iter, best_total
        loss, _ = eval_objective(params, eval_batch, grad=False, **_objective_kwargs(g, config, tau_at(it, config)))
        rec = LossRecord(it, loss.recon, loss.kl, loss.reg, loss.total, lr_at(it, config))
        history.append(rec)
        if not math.isfinite(loss.total):
            raise TrainingDiverged(f"non-finite evaluation loss at iteration {it}: {loss}")
        if loss.total < best_total:
            best_total, best_iter = loss.total, it
            # reuse the snapshot buffers; fresh 100 MB allocations page-fault
            for name, mat in params.matrices().items():
                np.copyto(getattr(best, name), mat)
        if callback is not None:
            callback(it, rec)

    for it in range(config.iters):
        if it % config.eval_every == 0:
            record(it)
        if full_batch:
            idx = None
            batch_pairs = pairs
        else:
            idx = rng.integers(0, n_pairs, size=config.batch_edges)
            batch_pairs = pairs[idx]
        batch = make_batch(
            g, batch_pairs, config, rng, n_categories, noise_dist,
            None if alpha is None else (alpha if idx is None else alpha[idx]),
        )
        tau = tau_at(it, config)
        if engine is not None:
            loss = engine.step(params, batch, state, lr_at(it, config), config.lam, tau)
        else:
            loss, grads = objective(params, batch, **_objective_kwargs(g, config, tau))
        if not math.isfinite(loss.total):
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {loss}")
        batch_losses.append(loss.total)
        if engine is None:
            adam_step(params, grads, state, lr_at(it, config))
    record(config.iters)
    if not params.is_finite():
        raise TrainingDiverged("parameters became non-finite")
    return TrainedModel(params, best, history, replace(config), best_iter, batch_losses)
